"""
Dense float64 kernels shared by the model, the SAE and the steering code.

Tensors are ``torch.float64`` on CPU. Kernels validate shapes up front and
act over the last dimension, broadcasting across leading batch dimensions.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch

from atom_steering.errors import DimensionError, InputError, ParameterError

DTYPE = torch.float64


def as_tensor(values: torch.Tensor | Sequence[float] | Sequence[Sequence[float]]) -> torch.Tensor:
    """Build a float64 CPU tensor from nested sequences or an existing tensor."""
    if isinstance(values, torch.Tensor):
        return values.to(dtype=DTYPE, device="cpu")
    return torch.tensor(values, dtype=DTYPE)


def check_finite(x: torch.Tensor, name: str) -> torch.Tensor:
    """Raise InputError when a tensor carries NaN or Inf."""
    if not bool(torch.isfinite(x).all()):
        raise InputError(f"{name} contains non-finite values", name=name)
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product ``a @ b``.

    ``a`` may be ``[k]`` (treated as a row), ``[m, k]`` or batched ``[..., m, k]``;
    ``b`` must be ``[k, n]``.

    Raises:
        DimensionError: If the inner dimensions disagree
    """
    if b.dim() != 2 or a.dim() < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul", tuple(a.shape), tuple(b.shape))
    return a @ b


def softmax(x: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """
    Temperature softmax over the last dimension with max-subtraction.

    Raises:
        ParameterError: If temperature is not positive
        InputError: If the last dimension is empty
    """
    if not temperature > 0:
        raise ParameterError("temperature", f"must be > 0, got {temperature}")
    if x.dim() == 0 or x.shape[-1] == 0:
        raise InputError("softmax needs at least one element", shape=list(x.shape))
    z = x / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """
    ``(x - mean) / sqrt(var + eps) * gain + bias`` over the last dimension.

    Variance is the biased (population) variance. ``eps = 0`` is accepted for
    exact checks on non-constant input; a constant row with ``eps = 0`` maps to
    ``bias`` instead of dividing by zero.

    Raises:
        DimensionError: If gain/bias length differs from the last dimension
        ParameterError: If eps is negative
    """
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm", tuple(x.shape), tuple(gain.shape))
    if eps < 0:
        raise ParameterError("eps", f"must be >= 0, got {eps}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    denom = torch.sqrt(var + eps)
    normed = torch.where(denom > 0, centered / torch.where(denom > 0, denom, 1.0), 0.0)
    return normed * gain + bias


def rank_threshold(values: torch.Tensor, top_fraction: float) -> float:
    """
    Value at 1-indexed rank ``ceil(top_fraction * n)`` of ``values`` sorted descending.

    The sort is stable on original index. Callers select with ``>=``, so every
    element tied with the returned value is admitted.

    Raises:
        ParameterError: If top_fraction is outside (0, 1]
        InputError: If values is empty
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ParameterError("top_fraction", f"must be in (0, 1], got {top_fraction}")
    flat = values.reshape(-1)
    n = flat.numel()
    if n == 0:
        raise InputError("rank_threshold needs at least one value")
    # rounding first keeps products like 0.35 * 20 from landing a hair above the integer
    rank = min(n, max(1, math.ceil(round(top_fraction * n, 12))))
    ordered = torch.sort(flat, descending=True, stable=True).values
    return float(ordered[rank - 1])


def l2_norm(x: torch.Tensor) -> float:
    """Euclidean norm of a vector as a Python float."""
    return float(torch.linalg.vector_norm(x))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine of the angle between two vectors; 0.0 when either is zero."""
    if a.shape != b.shape:
        raise DimensionError("cosine_similarity", tuple(a.shape), tuple(b.shape))
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(torch.dot(a, b)) / (na * nb)
