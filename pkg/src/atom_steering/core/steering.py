"""
Steering vector construction.

Three corpus methods share one representation of behavior contrast:

- CAA: mean over items of the difference between mean residual states of
  the positive and the negative answer tokens.
- SAE_AXBENCH: the same contrast taken in SAE atom space and decoded back
  with every atom admitted.
- STA: the atom-space contrast restricted to target atoms, those whose
  amplitude contrast and frequency contrast both clear thresholds taken at
  the top-fraction rank.

Prompts convert to vectors by contrasting ``BOS prompt SPACE`` with
``BOS SPACE`` at the final SPACE position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Literal

import structlog
import torch

from atom_steering.config import BOS, SPACE
from atom_steering.core import toymodel
from atom_steering.core.corpus import BehaviorCorpus, BehaviorItem
from atom_steering.core.numerics import DTYPE, as_tensor, l2_norm, matmul, rank_threshold
from atom_steering.core.sae import SaeParams, decode, encode
from atom_steering.core.storage_keys import FORMAT_VERSIONS, canonical_json, compute_hash
from atom_steering.errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    InputError,
    ParameterError,
)

logger = structlog.get_logger()

SelectionMode = Literal["full", "wo_amplitude", "wo_frequency"]
NORM_TOLERANCE = 1e-9


class VectorMethod(str, Enum):
    """How a steering vector was built."""

    CAA = "CAA"
    STA = "STA"
    SAE_AXBENCH = "SAE_AXBENCH"
    PROMPT_CAA = "PROMPT_CAA"
    PROMPT_STA = "PROMPT_STA"
    PROMPT_MEAN = "PROMPT_MEAN"


# =============================================================================
# Types
# =============================================================================


@dataclass
class AtomStats:
    """Per-atom amplitude and frequency contrast over a behavior corpus."""

    delta_a: torch.Tensor
    f_pos: torch.Tensor
    f_neg: torch.Tensor
    delta_f: torch.Tensor
    n_examples: int
    layer: int

    def __post_init__(self) -> None:
        shape = tuple(self.delta_a.shape)
        for name in ("f_pos", "f_neg", "delta_f"):
            if tuple(getattr(self, name).shape) != shape:
                raise DimensionError(f"atom_stats.{name}", tuple(getattr(self, name).shape), shape)
        if self.n_examples < 1:
            raise InputError("AtomStats needs at least one example")

    @property
    def n_atoms(self) -> int:
        return int(self.delta_a.shape[0])


@dataclass(frozen=True)
class SelectionThresholds:
    """Amplitude threshold alpha and frequency threshold beta."""

    alpha: float
    beta: float
    top_fraction: float | None = None

    @classmethod
    def pass_all(cls) -> SelectionThresholds:
        """Thresholds that admit every atom."""
        return cls(alpha=-math.inf, beta=-math.inf, top_fraction=None)

    @property
    def admits_all(self) -> bool:
        return self.alpha == -math.inf and self.beta == -math.inf


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return value


@dataclass
class SteeringVector:
    """A model-space direction with the metadata of how it was built."""

    values: torch.Tensor
    method: VectorMethod
    layer: int
    alpha: float | None = None
    beta: float | None = None
    top_fraction: float | None = None
    include_decoder_bias: bool | None = None
    selection_mode: str | None = None
    n_atoms: int | None = None
    source_hash: str = ""
    degenerate: bool = False
    aggregation: str = "mean over answer tokens"
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = as_tensor(self.values).reshape(-1)
        self.method = VectorMethod(self.method)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return l2_norm(self.values)

    def hook(self, multiplier: float) -> toymodel.SteerHook:
        return toymodel.SteerHook(layer=self.layer, vector=self.values, multiplier=multiplier)

    def with_values(self, values: torch.Tensor, **changes: Any) -> SteeringVector:
        data = {**self.__dict__, "values": values, **changes}
        data["extra"] = dict(data["extra"])
        return SteeringVector(**data)

    def to_dict(self) -> dict[str, Any]:
        """JSON form; floats survive a dump/load round trip bit for bit."""
        return {
            "version": FORMAT_VERSIONS["vector"],
            "method": self.method.value,
            "layer": self.layer,
            "dim": self.dim,
            "alpha": _finite_or_none(self.alpha),
            "beta": _finite_or_none(self.beta),
            "top_fraction": self.top_fraction,
            "include_decoder_bias": self.include_decoder_bias,
            "selection_mode": self.selection_mode,
            "n_atoms": self.n_atoms,
            "norm": self.norm,
            "degenerate": self.degenerate,
            "aggregation": self.aggregation,
            "source_hash": self.source_hash,
            "extra": self.extra,
            "values": [float(v) for v in self.values.tolist()],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SteeringVector:
        """
        Rebuild from to_dict output.

        Raises:
            InputError: If dim or norm disagree with the stored values
        """
        values = torch.tensor(data["values"], dtype=DTYPE)
        if values.shape[0] != data["dim"]:
            raise InputError("Vector dim field disagrees with its values", dim=data["dim"])
        vector = cls(
            values=values,
            method=VectorMethod(data["method"]),
            layer=int(data["layer"]),
            alpha=data.get("alpha"),
            beta=data.get("beta"),
            top_fraction=data.get("top_fraction"),
            include_decoder_bias=data.get("include_decoder_bias"),
            selection_mode=data.get("selection_mode"),
            n_atoms=data.get("n_atoms"),
            source_hash=data.get("source_hash", ""),
            degenerate=bool(data.get("degenerate", False)),
            aggregation=data.get("aggregation", "mean over answer tokens"),
            extra=dict(data.get("extra", {})),
        )
        if abs(vector.norm - float(data["norm"])) > NORM_TOLERANCE:
            raise InputError("Vector norm field disagrees with its values", norm=data["norm"])
        return vector


# =============================================================================
# Residual-state readout
# =============================================================================


def check_layer(model: toymodel.ToyTransformer, layer: int) -> None:
    """Raises ParameterError if the layer does not exist."""
    if not 0 <= layer < model.config.n_layers:
        raise ParameterError("layer", f"{layer} out of range for {model.config.n_layers} layers")


def answer_states(
    model: toymodel.ToyTransformer, item: BehaviorItem, layer: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Residual states of the positive and negative answer tokens at ``layer``."""
    states = []
    for answer in (item.pos, item.neg):
        tokens, span = item.framed(answer)
        trace = toymodel.forward(model, tokens)
        states.append(trace.hidden[layer][span.start : span.stop])
    return states[0], states[1]


def corpus_hash(corpus: BehaviorCorpus) -> str:
    return compute_hash(canonical_json([item.to_dict() for item in corpus.items]))


def _check_corpus(model: toymodel.ToyTransformer, corpus: BehaviorCorpus, layer: int) -> None:
    check_layer(model, layer)
    corpus.validate(model.config.max_seq, model.config.vocab_size)


def _check_sae(model: toymodel.ToyTransformer, sae: SaeParams) -> None:
    if sae.d_in != model.config.d_model:
        raise ConfigurationError(
            f"SAE input width {sae.d_in} does not match model d_model {model.config.d_model}",
            sae_d_in=sae.d_in,
            d_model=model.config.d_model,
        )


# =============================================================================
# Atom statistics and selection
# =============================================================================


def stats_from_means(pos_means: torch.Tensor, neg_means: torch.Tensor, layer: int) -> AtomStats:
    """
    Amplitude and frequency contrast from per-item mean activations ``[N, M]``.

    An atom is active for an item when its mean activation is nonzero.
    """
    pos_means, neg_means = as_tensor(pos_means), as_tensor(neg_means)
    if pos_means.shape != neg_means.shape or pos_means.dim() != 2:
        raise DimensionError("atom_stats", tuple(pos_means.shape), tuple(neg_means.shape))
    f_pos = (pos_means.abs() > 0).to(DTYPE).mean(dim=0)
    f_neg = (neg_means.abs() > 0).to(DTYPE).mean(dim=0)
    return AtomStats(
        delta_a=(pos_means - neg_means).mean(dim=0),
        f_pos=f_pos,
        f_neg=f_neg,
        delta_f=f_pos - f_neg,
        n_examples=int(pos_means.shape[0]),
        layer=layer,
    )


def collect_atom_stats(
    model: toymodel.ToyTransformer,
    sae: SaeParams,
    corpus: BehaviorCorpus,
    layer: int,
) -> AtomStats:
    """
    Encode answer-token states of every item and aggregate their contrast.

    Raises:
        ConfigurationError: If the SAE width does not match the model
        InputError: If the corpus is empty or has empty answers
    """
    _check_sae(model, sae)
    _check_corpus(model, corpus, layer)
    pos_means, neg_means = [], []
    for item in corpus.items:
        pos, neg = answer_states(model, item, layer)
        pos_means.append(encode(sae, pos).mean(dim=0))
        neg_means.append(encode(sae, neg).mean(dim=0))
    stats = stats_from_means(torch.stack(pos_means), torch.stack(neg_means), layer)
    logger.debug("atom_stats_collected", layer=layer, n_items=len(corpus), n_atoms=stats.n_atoms)
    return stats


def thresholds_from_fraction(stats: AtomStats, top_fraction: float) -> SelectionThresholds:
    """alpha and beta at the ``ceil(top_fraction * M)`` descending rank of delta_a and delta_f."""
    return SelectionThresholds(
        alpha=rank_threshold(stats.delta_a, top_fraction),
        beta=rank_threshold(stats.delta_f, top_fraction),
        top_fraction=top_fraction,
    )


def selection_mask(
    stats: AtomStats, thresholds: SelectionThresholds, mode: SelectionMode = "full"
) -> torch.Tensor:
    """Boolean mask of target atoms under a selection mode."""
    if mode not in ("full", "wo_amplitude", "wo_frequency"):
        raise ParameterError("mode", f"unknown selection mode {mode!r}")
    amplitude = stats.delta_a >= thresholds.alpha
    frequency = stats.delta_f >= thresholds.beta
    if mode == "wo_amplitude":
        return frequency
    if mode == "wo_frequency":
        return amplitude
    return amplitude & frequency


def select_target_atoms(
    stats: AtomStats, thresholds: SelectionThresholds, mode: SelectionMode = "full"
) -> torch.Tensor:
    """delta_a on target atoms, zero elsewhere."""
    mask = selection_mask(stats, thresholds, mode)
    return torch.where(mask, stats.delta_a, torch.zeros_like(stats.delta_a))


# =============================================================================
# Vector builders
# =============================================================================


def sta_vector(
    a_target: torch.Tensor,
    sae: SaeParams,
    include_decoder_bias: bool = True,
    layer: int = 0,
    method: VectorMethod = VectorMethod.STA,
    **metadata: Any,
) -> SteeringVector:
    """
    Decode target atoms into model space: ``a_target @ W_dec (+ b_dec)``.

    Raises:
        DimensionError: If a_target does not have one entry per atom
    """
    a_target = as_tensor(a_target)
    if tuple(a_target.shape) != (sae.d_sae,):
        raise DimensionError("sta_vector", tuple(a_target.shape), (sae.d_sae,))
    values = matmul(a_target, sae.w_dec)
    if include_decoder_bias:
        values = values + sae.b_dec
    metadata.setdefault("n_atoms", int((a_target != 0).sum()))
    return SteeringVector(
        values=values,
        method=method,
        layer=layer,
        include_decoder_bias=include_decoder_bias,
        **metadata,
    )


def build_sta(
    model: toymodel.ToyTransformer,
    sae: SaeParams,
    corpus: BehaviorCorpus,
    layer: int,
    top_fraction: float = 0.35,
    mode: SelectionMode = "full",
    include_decoder_bias: bool = True,
    stats: AtomStats | None = None,
) -> SteeringVector:
    """Collect stats (unless given), threshold at the top fraction, select and decode."""
    stats = stats or collect_atom_stats(model, sae, corpus, layer)
    thresholds = thresholds_from_fraction(stats, top_fraction)
    vector = sta_vector(
        select_target_atoms(stats, thresholds, mode),
        sae,
        include_decoder_bias,
        layer=layer,
        method=VectorMethod.STA,
        alpha=thresholds.alpha,
        beta=thresholds.beta,
        top_fraction=top_fraction,
        selection_mode=mode,
        source_hash=corpus_hash(corpus),
    )
    logger.info(
        "sta_vector_built",
        layer=layer,
        mode=mode,
        alpha=thresholds.alpha,
        beta=thresholds.beta,
        n_atoms=vector.n_atoms,
        norm=round(vector.norm, 6),
    )
    return vector


def axbench_vector(
    stats: AtomStats,
    sae: SaeParams,
    include_decoder_bias: bool = True,
    source_hash: str = "",
) -> SteeringVector:
    """STA with every atom admitted; the same selection and decode path."""
    thresholds = SelectionThresholds.pass_all()
    return sta_vector(
        select_target_atoms(stats, thresholds, "full"),
        sae,
        include_decoder_bias,
        layer=stats.layer,
        method=VectorMethod.SAE_AXBENCH,
        alpha=thresholds.alpha,
        beta=thresholds.beta,
        selection_mode="pass_all",
        source_hash=source_hash,
    )


def caa_from_states(pos_means: torch.Tensor, neg_means: torch.Tensor) -> torch.Tensor:
    """Mean over items of ``pos_means - neg_means`` for ``[N, D]`` inputs."""
    pos_means, neg_means = as_tensor(pos_means), as_tensor(neg_means)
    if pos_means.shape != neg_means.shape or pos_means.dim() != 2 or pos_means.shape[0] < 1:
        raise DimensionError("caa", tuple(pos_means.shape), tuple(neg_means.shape))
    return (pos_means - neg_means).mean(dim=0)


def caa_vector(model: toymodel.ToyTransformer, corpus: BehaviorCorpus, layer: int) -> SteeringVector:
    """
    Contrastive activation addition over answer tokens.

    Raises:
        InputError: If the corpus is empty or has empty answers
        ParameterError: If the layer does not exist
    """
    _check_corpus(model, corpus, layer)
    pos_means, neg_means = [], []
    for item in corpus.items:
        pos, neg = answer_states(model, item, layer)
        pos_means.append(pos.mean(dim=0))
        neg_means.append(neg.mean(dim=0))
    values = caa_from_states(torch.stack(pos_means), torch.stack(neg_means))
    vector = SteeringVector(
        values=values,
        method=VectorMethod.CAA,
        layer=layer,
        source_hash=corpus_hash(corpus),
        degenerate=bool((values == 0).all()),
    )
    logger.info("caa_vector_built", layer=layer, n_items=len(corpus), norm=round(vector.norm, 6))
    return vector


def match_magnitude(v: SteeringVector, reference: SteeringVector) -> SteeringVector:
    """
    Rescale ``v`` to the reference norm, keeping its direction.

    Raises:
        DegenerateInputError: If either vector is zero
    """
    target = reference.norm
    current = v.norm
    if target == 0.0:
        raise DegenerateInputError("Reference vector has zero norm", method=reference.method.value)
    if current == 0.0:
        raise DegenerateInputError("Cannot rescale a zero vector", method=v.method.value)
    return v.with_values(v.values * (target / current), extra={**v.extra, "matched_to": reference.method.value})


# =============================================================================
# Prompt conversion
# =============================================================================


def _final_state(model: toymodel.ToyTransformer, tokens: list[int], layer: int) -> torch.Tensor:
    return toymodel.forward(model, tokens).hidden[layer][-1]


def prompt_states(
    model: toymodel.ToyTransformer, prompt: list[int], layer: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """States at the final SPACE of ``BOS prompt SPACE`` and of ``BOS SPACE``."""
    check_layer(model, layer)
    positive = _final_state(model, [BOS, *prompt, SPACE], layer)
    negative = _final_state(model, [BOS, SPACE], layer)
    return positive, negative


def prompt_to_vector(
    model: toymodel.ToyTransformer,
    prompt: list[int],
    method: Literal["caa", "sta"] = "caa",
    layer: int = 0,
    sae: SaeParams | None = None,
    top_fraction: float = 0.35,
    include_decoder_bias: bool = True,
) -> SteeringVector:
    """
    Convert a prompt into a steering vector from one contrast pair.

    An empty prompt makes both inputs identical; the result is flagged
    degenerate rather than rejected.

    Raises:
        ConfigurationError: If method is "sta" without an SAE
    """
    prompt = [int(t) for t in prompt]
    source = compute_hash(canonical_json(prompt))
    positive, negative = prompt_states(model, prompt, layer)
    degenerate = len(prompt) == 0

    if method == "caa":
        values = positive - negative
        return SteeringVector(
            values=values,
            method=VectorMethod.PROMPT_CAA,
            layer=layer,
            source_hash=source,
            degenerate=degenerate or bool((values == 0).all()),
            aggregation="final SPACE position",
        )
    if method != "sta":
        raise ParameterError("method", f"unknown prompt conversion {method!r}")
    if sae is None:
        raise ConfigurationError("Prompt-to-STA conversion needs an SAE")
    _check_sae(model, sae)

    stats = stats_from_means(encode(sae, positive).unsqueeze(0), encode(sae, negative).unsqueeze(0), layer)
    thresholds = thresholds_from_fraction(stats, top_fraction)
    return sta_vector(
        select_target_atoms(stats, thresholds, "full"),
        sae,
        include_decoder_bias,
        layer=layer,
        method=VectorMethod.PROMPT_STA,
        alpha=thresholds.alpha,
        beta=thresholds.beta,
        top_fraction=top_fraction,
        selection_mode="full",
        source_hash=source,
        degenerate=degenerate,
        aggregation="final SPACE position",
    )


def prompt_mean_vector(model: toymodel.ToyTransformer, prompt: list[int], layer: int) -> SteeringVector:
    """
    Mean residual state over the prompt tokens of ``BOS prompt SPACE`` minus
    the final state of ``BOS SPACE``.

    Raises:
        InputError: If the prompt is empty
    """
    if not prompt:
        raise InputError("Prompt-mean conversion needs a non-empty prompt")
    check_layer(model, layer)
    prompt = [int(t) for t in prompt]
    trace = toymodel.forward(model, [BOS, *prompt, SPACE])
    mean_state = trace.hidden[layer][1 : 1 + len(prompt)].mean(dim=0)
    baseline = _final_state(model, [BOS, SPACE], layer)
    return SteeringVector(
        values=mean_state - baseline,
        method=VectorMethod.PROMPT_MEAN,
        layer=layer,
        source_hash=compute_hash(canonical_json(prompt)),
        aggregation="mean over prompt tokens",
    )


def pair_vector(model: toymodel.ToyTransformer, pair: BehaviorItem, layer: int) -> SteeringVector:
    """
    CAA from a single contrast pair (positive minus negative answer).

    Raises:
        DegenerateInputError: If both answers are identical
    """
    if tuple(pair.pos) == tuple(pair.neg):
        raise DegenerateInputError("Contrast pair answers are identical")
    return caa_vector(model, BehaviorCorpus([pair], "pair"), layer)


def decoded_difference(sae: SaeParams, pos_means: torch.Tensor, neg_means: torch.Tensor) -> torch.Tensor:
    """``mean_i(decode(pos_i) - decode(neg_i))``; equals the pass-all bias-free STA vector."""
    return (decode(sae, as_tensor(pos_means)) - decode(sae, as_tensor(neg_means))).mean(dim=0)


# =============================================================================
# Method dispatch
# =============================================================================

METHODS: tuple[str, ...] = ("caa", "sta", "axbench", "prompt-caa", "prompt-sta")


def build_vector(
    method: str,
    model: toymodel.ToyTransformer,
    layer: int,
    corpus: BehaviorCorpus | None = None,
    sae: SaeParams | None = None,
    prompt: list[int] | None = None,
    top_fraction: float = 0.35,
    include_decoder_bias: bool = True,
    match: bool = True,
    mode: SelectionMode = "full",
) -> SteeringVector:
    """
    Build a vector by method name.

    With ``match`` on, SAE-derived corpus vectors are rescaled to the CAA
    norm and prompt-STA vectors to the prompt-CAA norm. When either norm is
    zero the vector is returned unscaled with ``extra["matched_to"] = None``
    and the reason under ``extra["match_error"]``.

    Raises:
        ConfigurationError: If an SAE method has no SAE, or inputs are missing
        ParameterError: If the method is unknown
    """
    if method not in METHODS:
        raise ParameterError("method", f"must be one of {', '.join(METHODS)}, got {method!r}")
    if method in ("sta", "axbench", "prompt-sta") and sae is None:
        raise ConfigurationError(f"Method {method} needs an SAE", method=method)
    if method.startswith("prompt-"):
        if prompt is None:
            raise ConfigurationError(f"Method {method} needs a prompt", method=method)
        if method == "prompt-caa":
            return prompt_to_vector(model, prompt, "caa", layer)
        vector = prompt_to_vector(model, prompt, "sta", layer, sae, top_fraction, include_decoder_bias)
        reference = prompt_to_vector(model, prompt, "caa", layer) if match else None
    else:
        if corpus is None:
            raise ConfigurationError(f"Method {method} needs a behavior corpus", method=method)
        if method == "caa":
            return caa_vector(model, corpus, layer)
        assert sae is not None
        if method == "sta":
            vector = build_sta(model, sae, corpus, layer, top_fraction, mode, include_decoder_bias)
        else:
            stats = collect_atom_stats(model, sae, corpus, layer)
            vector = axbench_vector(stats, sae, include_decoder_bias, corpus_hash(corpus))
        reference = caa_vector(model, corpus, layer) if match else None

    if reference is None:
        return vector
    try:
        return match_magnitude(vector, reference)
    except DegenerateInputError as e:
        logger.warning("magnitude_match_skipped", method=method, reason=str(e))
        return vector.with_values(vector.values, extra={**vector.extra, "matched_to": None, "match_error": str(e)})
