"""
JumpReLU sparse autoencoder over residual-stream states.

Encoding is ``a = z * 1[z > theta]`` with ``z = h @ W_enc + b_enc`` and
decoding is the affine map ``a @ W_dec + b_dec``. Training minimizes the
per-token mean of ``||h - h_sae||^2 + gamma * ||a||_0``; the hard gate and
the L0 count get straight-through gradients through a rectangle kernel of
width ``bandwidth`` centred on each threshold.

Thresholds are learned as ``log_theta``. Training runs on mean-centered
activations and folds the mean into the biases at the end, so the returned
parameters encode raw activations directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import structlog
import torch
from torch import nn

from atom_steering.config import SaeTrainConfig
from atom_steering.core.numerics import DTYPE, as_tensor, check_finite, matmul
from atom_steering.core.toymodel import TrainingReport
from atom_steering.errors import DimensionError, InputError, ParameterError

logger = structlog.get_logger()

FD_STEP = 1e-5
# relative errors divide by at least this, so exact-zero gradients compare absolutely
REL_ERROR_FLOOR = 1e-8
PARAM_NAMES = ("w_enc", "b_enc", "w_dec", "b_dec", "log_theta")


# =============================================================================
# Types
# =============================================================================


@dataclass
class SaeParams:
    """Weights and thresholds of a trained (or initialized) SAE."""

    w_enc: torch.Tensor  # [D, M]
    b_enc: torch.Tensor  # [M]
    w_dec: torch.Tensor  # [M, D]
    b_dec: torch.Tensor  # [D]
    theta: torch.Tensor  # [M], >= 0
    dataset_mean: torch.Tensor | None = None  # [D], metadata only once folded
    gamma: float = 0.0
    bandwidth: float = 0.001

    def __post_init__(self) -> None:
        d, m = self.w_enc.shape
        if tuple(self.w_dec.shape) != (m, d):
            raise DimensionError("sae_params", tuple(self.w_enc.shape), tuple(self.w_dec.shape))
        for name, expected in (("b_enc", m), ("b_dec", d), ("theta", m)):
            if tuple(getattr(self, name).shape) != (expected,):
                raise DimensionError(f"sae_params.{name}", tuple(getattr(self, name).shape), (expected,))
        if bool((self.theta < 0).any()):
            raise ParameterError("theta", "thresholds must be non-negative")
        if self.dataset_mean is None:
            self.dataset_mean = torch.zeros(d, dtype=DTYPE)

    @property
    def d_in(self) -> int:
        return int(self.w_enc.shape[0])

    @property
    def d_sae(self) -> int:
        return int(self.w_enc.shape[1])

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "w_enc": self.w_enc,
            "b_enc": self.b_enc,
            "w_dec": self.w_dec,
            "b_dec": self.b_dec,
            "theta": self.theta,
        }


@dataclass
class SaeTrainingReport(TrainingReport):
    """
    Loss trajectory plus reconstruction and sparsity terms per step.

    ``max_norm_error`` is the worst decoder row-norm deviation from 1 seen
    after any step's renormalization.
    """

    recon_losses: list[float] = field(default_factory=list)
    l0: list[float] = field(default_factory=list)
    final_l0: float = float("nan")
    final_recon: float = float("nan")
    initial_recon: float = float("nan")
    max_norm_error: float = 0.0
    reduction: str = "per-token mean"

    def to_dict(self) -> dict:
        return {
            **super().to_dict(),
            "initial_recon": self.initial_recon,
            "final_recon": self.final_recon,
            "final_l0": self.final_l0,
            "max_norm_error": self.max_norm_error,
            "reduction": self.reduction,
        }


@dataclass
class GradientCheckResult:
    """Worst absolute and relative gradient errors over the checked coordinates."""

    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_atoms: int = 0

    def record(self, analytic: float, numeric: float) -> None:
        diff = abs(analytic - numeric)
        self.max_abs_error = max(self.max_abs_error, diff)
        self.max_rel_error = max(self.max_rel_error, diff / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR))
        self.checked += 1

    def to_dict(self) -> dict:
        return {
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "skipped_atoms": self.skipped_atoms,
        }


# =============================================================================
# Straight-through estimators
# =============================================================================


def _rectangle(u: torch.Tensor) -> torch.Tensor:
    return (u.abs() < 0.5).to(u.dtype)


class _JumpReLU(torch.autograd.Function):
    """Forward ``z * H(z - theta)``; backward H to z and ``-(theta/eps) K`` to theta."""

    @staticmethod
    def forward(ctx, z: torch.Tensor, theta: torch.Tensor, bandwidth: float) -> torch.Tensor:
        ctx.save_for_backward(z, theta)
        ctx.bandwidth = bandwidth
        return torch.where(z > theta, z, torch.zeros_like(z))

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        z, theta = ctx.saved_tensors
        eps = ctx.bandwidth
        gate = (z > theta).to(z.dtype)
        kernel = _rectangle((z - theta) / eps)
        grad_theta = -(theta / eps) * kernel * grad_output
        grad_theta = grad_theta.reshape(-1, theta.shape[-1]).sum(dim=0)
        return grad_output * gate, grad_theta, None


class _Step(torch.autograd.Function):
    """Forward ``H(z - theta)``; backward ``K / eps`` to z and ``-K / eps`` to theta."""

    @staticmethod
    def forward(ctx, z: torch.Tensor, theta: torch.Tensor, bandwidth: float) -> torch.Tensor:
        ctx.save_for_backward(z, theta)
        ctx.bandwidth = bandwidth
        return (z > theta).to(z.dtype)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        z, theta = ctx.saved_tensors
        eps = ctx.bandwidth
        grad_z = _rectangle((z - theta) / eps) / eps * grad_output
        grad_theta = -grad_z.reshape(-1, theta.shape[-1]).sum(dim=0)
        return grad_z, grad_theta, None


class _SaeModule(nn.Module):
    """Trainable view of SaeParams with thresholds held as log_theta."""

    def __init__(self, params: SaeParams):
        super().__init__()
        self.w_enc = nn.Parameter(params.w_enc.clone())
        self.b_enc = nn.Parameter(params.b_enc.clone())
        self.w_dec = nn.Parameter(params.w_dec.clone())
        self.b_dec = nn.Parameter(params.b_dec.clone())
        self.log_theta = nn.Parameter(torch.log(params.theta.clone()))
        self.bandwidth = params.bandwidth

    def loss(self, h: torch.Tensor, gamma: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        theta = torch.exp(self.log_theta)
        z = h @ self.w_enc + self.b_enc
        a = _JumpReLU.apply(z, theta, self.bandwidth)
        h_sae = a @ self.w_dec + self.b_dec
        recon = ((h - h_sae) ** 2).sum(dim=-1).mean()
        l0 = _Step.apply(z, theta, self.bandwidth).sum(dim=-1).mean()
        return recon + gamma * l0, recon, l0

    @torch.no_grad()
    def normalize_decoder(self) -> float:
        """Rescale decoder rows to unit length; returns the largest remaining norm deviation."""
        self.w_dec.div_(torch.linalg.vector_norm(self.w_dec, dim=-1, keepdim=True))
        return float((torch.linalg.vector_norm(self.w_dec, dim=-1) - 1.0).abs().max())

    def to_params(self, gamma: float, mean: torch.Tensor | None = None) -> SaeParams:
        """Export, folding a centering mean into the biases when given."""
        w_enc = self.w_enc.detach().clone()
        b_enc = self.b_enc.detach().clone()
        b_dec = self.b_dec.detach().clone()
        if mean is not None:
            b_enc = b_enc - mean @ w_enc
            b_dec = b_dec + mean
        return SaeParams(
            w_enc=w_enc,
            b_enc=b_enc,
            w_dec=self.w_dec.detach().clone(),
            b_dec=b_dec,
            theta=torch.exp(self.log_theta.detach()),
            dataset_mean=None if mean is None else mean.clone(),
            gamma=gamma,
            bandwidth=self.bandwidth,
        )


# =============================================================================
# Operations
# =============================================================================


def _check_last_dim(x: torch.Tensor, expected: int, operation: str) -> None:
    if x.dim() < 1 or x.shape[-1] != expected:
        raise DimensionError(operation, tuple(x.shape), (expected,))


def encode(params: SaeParams, h: torch.Tensor) -> torch.Tensor:
    """``z * 1[z > theta]`` for ``z = h @ W_enc + b_enc``; zeroed entries are exact zeros."""
    h = as_tensor(h)
    _check_last_dim(h, params.d_in, "sae.encode")
    z = matmul(h, params.w_enc) + params.b_enc
    return torch.where(z > params.theta, z, torch.zeros_like(z))


def decode(params: SaeParams, a: torch.Tensor) -> torch.Tensor:
    """``a @ W_dec + b_dec``."""
    a = as_tensor(a)
    _check_last_dim(a, params.d_sae, "sae.decode")
    return matmul(a, params.w_dec) + params.b_dec


def sae_loss(params: SaeParams, h: torch.Tensor, config: SaeTrainConfig) -> tuple[float, float, float]:
    """
    ``(total, recon, sparsity)`` as per-example means over a batch.

    Raises:
        ParameterError: If gamma is negative
    """
    if config.gamma < 0:
        raise ParameterError("gamma", f"must be >= 0, got {config.gamma}")
    h = as_tensor(h)
    batch = h.reshape(-1, h.shape[-1]) if h.dim() >= 1 else h
    a = encode(params, batch)
    recon = float(((batch - decode(params, a)) ** 2).sum(dim=-1).mean())
    sparsity = config.gamma * float((a != 0).to(DTYPE).sum(dim=-1).mean())
    return recon + sparsity, recon, sparsity


def init_sae(d_in: int, config: SaeTrainConfig, dataset_mean: torch.Tensor | None = None) -> SaeParams:
    """
    Seeded initialization: unit-norm decoder rows, encoder the decoder transpose,
    zero biases and thresholds at ``initial_threshold``.

    With a dataset mean the biases are folded exactly as training folds them.

    Raises:
        ParameterError: If d_sae does not exceed d_in
    """
    return _initial_module(d_in, config).to_params(config.gamma, dataset_mean)


def _initial_module(d_in: int, config: SaeTrainConfig) -> _SaeModule:
    if config.d_sae <= d_in:
        raise ParameterError("d_sae", f"must exceed d_in ({d_in}), got {config.d_sae}")
    generator = torch.Generator().manual_seed(config.seed)
    w_dec = torch.randn((config.d_sae, d_in), generator=generator, dtype=DTYPE)
    w_dec = w_dec / torch.linalg.vector_norm(w_dec, dim=-1, keepdim=True)
    centered = SaeParams(
        w_enc=w_dec.T.clone(),
        b_enc=torch.zeros(config.d_sae, dtype=DTYPE),
        w_dec=w_dec,
        b_dec=torch.zeros(d_in, dtype=DTYPE),
        theta=torch.full((config.d_sae,), config.initial_threshold, dtype=DTYPE),
        gamma=config.gamma,
        bandwidth=config.bandwidth,
    )
    return _SaeModule(centered)


def _make_optimizer(module: _SaeModule, config: SaeTrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(module.parameters(), lr=config.lr)
    return torch.optim.SGD(module.parameters(), lr=config.lr)


def train_sae(activations: torch.Tensor, config: SaeTrainConfig) -> tuple[SaeParams, SaeTrainingReport]:
    """
    Train a JumpReLU SAE on ``[N, D]`` activations.

    Minibatches follow a seeded permutation per epoch. Decoder rows are
    renormalized to unit length after every step.

    Raises:
        InputError: If activations are empty or non-finite
        ParameterError: If gamma is negative or d_sae does not exceed D
    """
    activations = as_tensor(activations)
    if activations.dim() != 2 or activations.shape[0] < 1:
        raise InputError("SAE training needs a non-empty [N, D] activation matrix", shape=list(activations.shape))
    check_finite(activations, "activations")
    if config.gamma < 0:
        raise ParameterError("gamma", f"must be >= 0, got {config.gamma}")

    n, d = activations.shape
    mean = activations.mean(dim=0)
    centered = activations - mean

    module = _initial_module(d, config)
    optimizer = _make_optimizer(module, config)
    generator = torch.Generator().manual_seed(config.seed + 1)
    report = SaeTrainingReport(steps=config.steps, lr=config.lr)

    with torch.no_grad():
        _, recon0, _ = module.loss(centered, config.gamma)
    report.initial_recon = float(recon0)

    order = torch.randperm(n, generator=generator)
    cursor = 0
    for step in range(config.steps):
        if cursor >= n:
            order = torch.randperm(n, generator=generator)
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size

        optimizer.zero_grad(set_to_none=True)
        total, recon, l0 = module.loss(centered[idx], config.gamma)
        total.backward()
        optimizer.step()
        report.max_norm_error = max(report.max_norm_error, module.normalize_decoder())

        report.losses.append(float(total.detach()))
        report.recon_losses.append(float(recon.detach()))
        report.l0.append(float(l0.detach()))
        if step % config.log_every == 0 or step == config.steps - 1:
            logger.info(
                "sae_train_step",
                step=step,
                loss=round(report.losses[-1], 6),
                recon=round(report.recon_losses[-1], 6),
            )

    params = module.to_params(config.gamma, mean)
    a = encode(params, activations)
    report.final_l0 = float((a != 0).to(DTYPE).sum(dim=-1).mean())
    report.final_recon = float(((activations - decode(params, a)) ** 2).sum(dim=-1).mean())
    logger.info(
        "sae_trained",
        steps=config.steps,
        n=n,
        d_in=d,
        d_sae=config.d_sae,
        final_l0=round(report.final_l0, 3),
        final_recon=round(report.final_recon, 6),
    )
    return params, report


def sae_gradients(params: SaeParams, h: torch.Tensor, gamma: float) -> dict[str, torch.Tensor]:
    """Analytic STE gradients of the surrogate loss, keyed by parameter name (theta as log_theta)."""
    module = _SaeModule(params)
    total, _, _ = module.loss(as_tensor(h).reshape(-1, params.d_in), gamma)
    total.backward()
    return {name: getattr(module, name).grad.detach().clone() for name in PARAM_NAMES}


def gradient_check(params: SaeParams, h: torch.Tensor, config: SaeTrainConfig) -> GradientCheckResult:
    """
    Compare STE gradients against central finite differences (step 1e-5).

    Coordinates belonging to an atom whose pre-activation lies within
    ``2 * bandwidth`` of its threshold on any example are skipped, as are
    atoms with a zero threshold. Per coordinate the absolute error is
    ``|analytic - numeric|`` and the relative error divides it by
    ``max(|analytic|, |numeric|, REL_ERROR_FLOOR)``.

    Raises:
        DimensionError: If h does not match the SAE input width
    """
    h = as_tensor(h)
    _check_last_dim(h, params.d_in, "sae.gradient_check")
    batch = h.reshape(-1, params.d_in)
    params = SaeParams(**{**params.tensors(), "gamma": config.gamma, "bandwidth": config.bandwidth})

    z = matmul(batch, params.w_enc) + params.b_enc
    near = ((z - params.theta).abs() < 2 * config.bandwidth).any(dim=0) | (params.theta <= 0)
    analytic = sae_gradients(params, batch, config.gamma)

    module = _SaeModule(params)

    def loss_value() -> float:
        with torch.no_grad():
            return float(module.loss(batch, config.gamma)[0])

    result = GradientCheckResult(skipped_atoms=int(near.sum()))
    for name in PARAM_NAMES:
        tensor = getattr(module, name)
        flat = tensor.data.view(-1)
        for index in range(flat.numel()):
            atom = _atom_of(name, index, params.d_in, params.d_sae)
            if atom is not None and bool(near[atom]):
                continue
            original = float(flat[index])
            flat[index] = original + FD_STEP
            plus = loss_value()
            flat[index] = original - FD_STEP
            minus = loss_value()
            flat[index] = original
            numeric = (plus - minus) / (2 * FD_STEP)
            exact = float(analytic[name].view(-1)[index])
            result.record(exact, numeric)
    logger.debug("gradient_check", **result.to_dict())
    return result


def _atom_of(name: str, index: int, d_in: int, d_sae: int) -> int | None:
    """Atom a flat parameter coordinate belongs to, or None for b_dec."""
    if name == "w_enc":
        return index % d_sae
    if name == "w_dec":
        return index // d_in
    if name in ("b_enc", "log_theta"):
        return index
    return None


def random_params(d_in: int, d_sae: int, seed: int, threshold_scale: float = 0.5) -> SaeParams:
    """Small random SAE for checks; thresholds are positive and of order ``threshold_scale``."""
    generator = torch.Generator().manual_seed(seed)
    w_enc = torch.randn((d_in, d_sae), generator=generator, dtype=DTYPE)
    w_dec = torch.randn((d_sae, d_in), generator=generator, dtype=DTYPE) / math.sqrt(d_in)
    b_enc = 0.1 * torch.randn(d_sae, generator=generator, dtype=DTYPE)
    b_dec = 0.1 * torch.randn(d_in, generator=generator, dtype=DTYPE)
    theta = threshold_scale * (0.5 + torch.rand(d_sae, generator=generator, dtype=DTYPE))
    return SaeParams(w_enc=w_enc, b_enc=b_enc, w_dec=w_dec, b_dec=b_dec, theta=theta)
