"""
Evaluation harness.

Behavior is scored as the next-token probability mass on the positive
lexicon, renormalized over both lexicons, at the end of ``BOS q SPACE``.
Fluency is the distinct-n ratio of a generated continuation. Sweeps run
every (multiplier, seed) cell independently and assemble rows in request
order, so the reports are identical for any worker count.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, TypeVar

import pandas as pd
import structlog
import torch
from nltk.util import ngrams

from atom_steering.config import BOS, SPACE, GenerationConfig, derive_seed
from atom_steering.core import toymodel
from atom_steering.core.corpus import BehaviorCorpus, BehaviorItem, BehaviorLexicon, demonstration_prefix
from atom_steering.core.numerics import softmax
from atom_steering.core.sae import SaeParams
from atom_steering.core.steering import (
    SteeringVector,
    build_vector,
    caa_vector,
    pair_vector,
    prompt_mean_vector,
)
from atom_steering.errors import ConfigurationError, InputError, ParameterError

logger = structlog.get_logger()

MAX_SHOTS = 16
POSITIONS = ("input_prefix", "input_suffix", "output_prefix")
T = TypeVar("T")


# =============================================================================
# Report types
# =============================================================================


@dataclass
class SweepRow:
    """One sweep row; ``kind`` is "cell" (one seed) or "aggregate" (over seeds)."""

    kind: str
    lam: float
    seed: int | None
    behavior_score: float | None
    fluency: float
    mean_length: float
    fluency_min: float | None = None
    fluency_max: float | None = None
    length_min: float | None = None
    length_max: float | None = None
    top_tokens: list[tuple[int, float]] = field(default_factory=list)

    @property
    def topk_mass(self) -> float:
        return float(sum(p for _, p in self.top_tokens))

    def to_record(self) -> dict[str, Any]:
        record = dataclasses.asdict(self)
        record["lambda"] = record.pop("lam")
        record["top_tokens"] = ";".join(f"{t}:{p:.6f}" for t, p in self.top_tokens)
        record["topk_mass"] = self.topk_mass
        return record


REPORT_COLUMNS = [
    "kind", "lambda", "seed", "behavior_score", "fluency", "fluency_min", "fluency_max",
    "mean_length", "length_min", "length_max", "topk_mass", "top_tokens",
]


@dataclass
class SweepReport:
    """Aggregate rows (one per requested multiplier) plus the per-seed cells."""

    rows: list[SweepRow]
    cells: list[SweepRow] = field(default_factory=list)
    name: str = "sweep"

    def row(self, lam: float) -> SweepRow:
        for row in self.rows:
            if row.lam == lam:
                return row
        raise KeyError(lam)

    def cells_for(self, lam: float) -> list[SweepRow]:
        return [c for c in self.cells if c.lam == lam]

    def to_frame(self) -> pd.DataFrame:
        """Cells then aggregates, fixed column order."""
        records = [r.to_record() for r in (*self.cells, *self.rows)]
        return pd.DataFrame(records, columns=REPORT_COLUMNS)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "columns": REPORT_COLUMNS,
            "rows": [r.to_record() for r in self.rows],
            "cells": [c.to_record() for c in self.cells],
        }


def rows_frame(rows: Sequence[Any]) -> pd.DataFrame:
    """DataFrame from a list of result dataclasses."""
    return pd.DataFrame([r.to_record() if hasattr(r, "to_record") else dataclasses.asdict(r) for r in rows])


# =============================================================================
# Metrics
# =============================================================================


def lexicon_score(probs: torch.Tensor, lexicon: BehaviorLexicon) -> float:
    """Positive-lexicon mass renormalized over both lexicons; 0.5 when both are empty."""
    pos = float(probs[sorted(lexicon.positive_tokens)].sum())
    neg = float(probs[sorted(lexicon.negative_tokens)].sum())
    total = pos + neg
    return pos / total if total > 0 else 0.5


def behavior_score(
    model: toymodel.ToyTransformer,
    eval_prompts: Sequence[Sequence[int]],
    hook: toymodel.SteerHook | None,
    lexicon: BehaviorLexicon,
) -> float:
    """
    Mean lexicon score of the final-position next-token distribution.

    Raises:
        ConfigurationError: If the lexicon does not fit the vocabulary
        InputError: If there are no prompts
    """
    lexicon.check_vocab(model.config.vocab_size)
    if not eval_prompts:
        raise InputError("behavior_score needs at least one prompt")
    scores = []
    for prompt in eval_prompts:
        logits = toymodel.run(model, prompt, hook).logits[-1]
        scores.append(lexicon_score(softmax(logits), lexicon))
    return float(sum(scores) / len(scores))


def fluency_ngram(sequence: Sequence[int], n: int = 2) -> float:
    """
    Distinct n-grams divided by total n-grams.

    Raises:
        ParameterError: If n < 1
        InputError: If the sequence is shorter than n
    """
    if n < 1:
        raise ParameterError("n", f"must be >= 1, got {n}")
    if len(sequence) < n:
        raise InputError(f"Sequence of {len(sequence)} tokens is shorter than n={n}")
    grams = list(ngrams(list(sequence), n))
    return len(set(grams)) / len(grams)


def topk_from_logits(logits: torch.Tensor, k: int) -> list[tuple[int, float]]:
    """Top-k of softmax(logits); ties go to the lower token id."""
    if not 1 <= k <= logits.shape[-1]:
        raise ParameterError("k", f"must be in [1, {logits.shape[-1]}], got {k}")
    probs = softmax(logits)
    order = torch.sort(probs, descending=True, stable=True).indices[:k]
    return [(int(i), float(probs[i])) for i in order]


def topk_distribution(
    model: toymodel.ToyTransformer,
    prompt: Sequence[int],
    hook: toymodel.SteerHook | None,
    k: int,
) -> list[tuple[int, float]]:
    """Top-k next-token distribution at the final position of the prompt."""
    return topk_from_logits(toymodel.run(model, prompt, hook).logits[-1], k)


def continuation_stats(continuations: Sequence[Sequence[int]], n: int) -> tuple[float, float]:
    """
    (mean fluency, mean length) over continuations.

    Continuations shorter than n are left out of the fluency mean; with none
    scorable fluency is 1.0.
    """
    scorable = [fluency_ngram(c, n) for c in continuations if len(c) >= n]
    fluency = sum(scorable) / len(scorable) if scorable else 1.0
    length = sum(len(c) for c in continuations) / len(continuations) if continuations else 0.0
    return fluency, length


# =============================================================================
# Sweeps
# =============================================================================


def _map_ordered(fn: Callable[..., T], items: Sequence[Any], max_workers: int) -> list[T]:
    """Map in request order; parallel when more than one worker."""
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


def _hook_for(vector: SteeringVector | None, lam: float) -> toymodel.SteerHook | None:
    if vector is None or lam == 0:
        return None
    return vector.hook(lam)


def _generate_all(
    model: toymodel.ToyTransformer,
    prompts: Sequence[Sequence[int]],
    hook: toymodel.SteerHook | None,
    gen: GenerationConfig,
    seed: int,
    base_seed: int,
) -> list[list[int]]:
    return [
        toymodel.generate(
            model,
            prompt,
            gen.max_new,
            gen.temperature,
            hook,
            seed=derive_seed(base_seed, f"gen:{seed}:{index}"),
        )
        for index, prompt in enumerate(prompts)
    ]


def _aggregate(lam: float, cells: list[SweepRow], score: float | None, top: list[tuple[int, float]]) -> SweepRow:
    fluencies = [c.fluency for c in cells]
    lengths = [c.mean_length for c in cells]
    return SweepRow(
        kind="aggregate",
        lam=lam,
        seed=None,
        behavior_score=score,
        fluency=sum(fluencies) / len(fluencies),
        mean_length=sum(lengths) / len(lengths),
        fluency_min=min(fluencies),
        fluency_max=max(fluencies),
        length_min=min(lengths),
        length_max=max(lengths),
        top_tokens=top,
    )


def _run_sweep(
    model: toymodel.ToyTransformer,
    vector: SteeringVector | None,
    lambdas: Sequence[float],
    prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon | None,
    gen: GenerationConfig,
    top_k: int,
    fluency_n: int,
    max_workers: int,
    base_seed: int,
    name: str,
) -> SweepReport:
    if not lambdas:
        raise InputError("Sweep needs at least one multiplier")
    if not prompts:
        raise InputError("Sweep needs at least one prompt")

    def run_cell(cell: tuple[float, int]) -> SweepRow:
        lam, seed = cell
        hook = _hook_for(vector, lam)
        fluency, length = continuation_stats(
            _generate_all(model, prompts, hook, gen, seed, base_seed), fluency_n
        )
        return SweepRow(kind="cell", lam=lam, seed=seed, behavior_score=None, fluency=fluency, mean_length=length)

    grid = [(float(lam), seed) for lam in lambdas for seed in range(gen.n_seeds)]
    cells = _map_ordered(run_cell, grid, max_workers)

    rows = []
    for lam in lambdas:
        lam = float(lam)
        hook = _hook_for(vector, lam)
        score = behavior_score(model, prompts, hook, lexicon) if lexicon is not None else None
        top = topk_distribution(model, prompts[0], hook, top_k)
        for cell in cells:
            if cell.lam == lam:
                cell.behavior_score = score
        row = _aggregate(lam, [c for c in cells if c.lam == lam], score, top)
        rows.append(row)
        logger.info(
            "sweep_row",
            sweep=name,
            lam=lam,
            behavior_score=None if score is None else round(score, 4),
            fluency=round(row.fluency, 4),
            mean_length=round(row.mean_length, 3),
        )
    return SweepReport(rows=rows, cells=cells, name=name)


def boundary_sweep(
    model: toymodel.ToyTransformer,
    vector: SteeringVector,
    lambdas: Sequence[float],
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    gen: GenerationConfig,
    top_k: int = 5,
    fluency_n: int = 2,
    max_workers: int = 1,
    base_seed: int = 0,
) -> SweepReport:
    """
    Behavior score, fluency, length and top-k distribution per multiplier.

    The top-k distribution is read on the first evaluation prompt. The zero
    multiplier runs without a hook, so its row is the vanilla run.

    Raises:
        ConfigurationError: If the vector width differs from the model
    """
    check_vector(model, vector)
    return _run_sweep(
        model, vector, lambdas, eval_prompts, lexicon, gen, top_k, fluency_n,
        max_workers, base_seed, "boundary",
    )


def length_steering_eval(
    model: toymodel.ToyTransformer,
    contrast_pair: BehaviorItem,
    lambdas: Sequence[float],
    probe_prompts: Sequence[Sequence[int]],
    gen: GenerationConfig,
    layer: int,
    top_k: int = 5,
    fluency_n: int = 2,
    max_workers: int = 1,
    base_seed: int = 0,
) -> SweepReport:
    """
    Steer reasoning length with a CAA vector from one long/short pair (long positive).

    Raises:
        DegenerateInputError: If the long and short answers are identical
    """
    vector = pair_vector(model, contrast_pair, layer)
    return _run_sweep(
        model, vector, lambdas, probe_prompts, None, gen, top_k, fluency_n,
        max_workers, base_seed, "length",
    )


def check_vector(model: toymodel.ToyTransformer, vector: SteeringVector) -> None:
    if vector.dim != model.config.d_model:
        raise ConfigurationError(
            f"Vector dim {vector.dim} does not match model d_model {model.config.d_model}",
            vector_dim=vector.dim,
            d_model=model.config.d_model,
        )
    if not 0 <= vector.layer < model.config.n_layers:
        raise ConfigurationError(
            f"Vector layer {vector.layer} out of range for {model.config.n_layers} layers",
            layer=vector.layer,
        )


# =============================================================================
# Prompt placement and demonstrations
# =============================================================================


def _question_of(prompt: Sequence[int]) -> list[int]:
    """Question tokens of a ``BOS q SPACE`` evaluation prompt."""
    tokens = list(prompt)
    if len(tokens) < 2 or tokens[0] != BOS or tokens[-1] != SPACE:
        raise InputError("Evaluation prompts must look like BOS question SPACE")
    return tokens[1:-1]


def place_prompt(eval_prompt: Sequence[int], prompt: Sequence[int], position: str) -> list[int]:
    """Concatenate a system prompt at the input prefix, input suffix or output prefix."""
    question = _question_of(eval_prompt)
    prompt = list(prompt)
    if position == "input_prefix":
        return [BOS, *prompt, *question, SPACE]
    if position == "input_suffix":
        return [BOS, *question, *prompt, SPACE]
    if position == "output_prefix":
        return [BOS, *question, SPACE, *prompt]
    raise ParameterError("position", f"must be one of {', '.join(POSITIONS)}, got {position!r}")


@dataclass
class PositionRow:
    position: str
    behavior_score: float


def prompt_position_ablation(
    model: toymodel.ToyTransformer,
    prompt: Sequence[int],
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    positions: Sequence[str] = POSITIONS,
) -> dict[str, float]:
    """
    Behavior score with the prompt placed at each position.

    Raises:
        InputError: If a placement exceeds max_seq
    """
    scores = {}
    for position in positions:
        placed = [place_prompt(p, prompt, position) for p in eval_prompts]
        scores[position] = behavior_score(model, placed, None, lexicon)
        logger.info("prompt_position_scored", position=position, score=round(scores[position], 4))
    return scores


@dataclass
class ShotRow:
    shots: int
    positive: bool
    behavior_score: float
    top_tokens: list[tuple[int, float]]

    def to_record(self) -> dict[str, Any]:
        return {
            "shots": self.shots,
            "direction": "positive" if self.positive else "negative",
            "behavior_score": self.behavior_score,
            "topk_mass": float(sum(p for _, p in self.top_tokens)),
            "top_tokens": ";".join(f"{t}:{p:.6f}" for t, p in self.top_tokens),
        }


def demonstration_sweep(
    model: toymodel.ToyTransformer,
    corpus: BehaviorCorpus,
    shots: Sequence[int],
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    positive: bool = True,
    top_k: int = 5,
) -> list[ShotRow]:
    """
    Few-shot prompting: prefix k demonstrations of one behavior to each prompt.

    Raises:
        ParameterError: If a shot count is outside [0, 16]
        InputError: If the corpus is too small or a prompt becomes overlong
    """
    rows = []
    for k in shots:
        if not 0 <= k <= MAX_SHOTS:
            raise ParameterError("shots", f"must be in [0, {MAX_SHOTS}], got {k}")
        if k > len(corpus):
            raise InputError(f"{k} shots requested but the corpus has {len(corpus)} items")
        block = demonstration_prefix(corpus.items[:k], positive)
        prompts = [[BOS, *block, *_question_of(p), SPACE] for p in eval_prompts]
        rows.append(
            ShotRow(
                shots=k,
                positive=positive,
                behavior_score=behavior_score(model, prompts, None, lexicon),
                top_tokens=topk_distribution(model, prompts[0], None, top_k),
            )
        )
    return rows


# =============================================================================
# Method, data and layer comparisons
# =============================================================================


@dataclass
class MethodRow:
    method: str
    layer: int
    behavior_score: float
    norm: float
    n_atoms: int | None
    attention: list[float]

    def to_record(self) -> dict[str, Any]:
        record = {
            "method": self.method,
            "layer": self.layer,
            "behavior_score": self.behavior_score,
            "norm": self.norm,
            "n_atoms": self.n_atoms,
        }
        for index, value in enumerate(self.attention):
            record[f"attn_layer{index}"] = value
        return record


def question_attention(
    model: toymodel.ToyTransformer,
    prompts: Sequence[Sequence[int]],
    hook: toymodel.SteerHook | None,
    prefix_len: int = 0,
) -> list[float]:
    """Per-layer attention mass on the question span, averaged over prompts."""
    totals = [0.0] * model.config.n_layers
    for prompt in prompts:
        trace = toymodel.run(model, prompt, hook)
        # BOS, optional prefix, question, SPACE
        span = (1 + prefix_len, len(prompt) - 1)
        for index, value in enumerate(toymodel.attention_to_span(trace, span)):
            totals[index] += value
    return [t / len(prompts) for t in totals]


def _method_row(
    model: toymodel.ToyTransformer,
    name: str,
    vector: SteeringVector | None,
    multiplier: float,
    prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    layer: int,
    prefix_len: int = 0,
) -> MethodRow:
    hook = _hook_for(vector, multiplier)
    return MethodRow(
        method=name,
        layer=layer,
        behavior_score=behavior_score(model, prompts, hook, lexicon),
        norm=vector.norm if vector is not None else 0.0,
        n_atoms=vector.n_atoms if vector is not None else None,
        attention=question_attention(model, prompts, hook, prefix_len),
    )


def compare_methods(
    model: toymodel.ToyTransformer,
    sae: SaeParams,
    corpus: BehaviorCorpus,
    layer: int,
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    prompt: Sequence[int],
    top_fraction: float = 0.35,
    multiplier: float = 1.0,
    include_decoder_bias: bool = True,
) -> list[MethodRow]:
    """
    Vanilla, prompting and every steering method side by side.

    SAE-derived corpus vectors are matched to the CAA norm and prompt-STA to
    the prompt-CAA norm. The prompt-mean vector is left at its own norm. Each row also carries the attention mass on the
    question span.
    """
    prompt = list(prompt)
    common = dict(model=model, layer=layer, corpus=corpus, sae=sae, prompt=prompt,
                  top_fraction=top_fraction, include_decoder_bias=include_decoder_bias)
    caa = caa_vector(model, corpus, layer)
    vectors: list[tuple[str, SteeringVector]] = [
        ("caa", caa),
        ("axbench", build_vector("axbench", **common)),
        ("sta", build_vector("sta", **common)),
        ("sta_wo_amplitude", build_vector("sta", mode="wo_amplitude", **common)),
        ("sta_wo_frequency", build_vector("sta", mode="wo_frequency", **common)),
        ("prompt_caa", build_vector("prompt-caa", **common)),
        ("prompt_sta", build_vector("prompt-sta", **common)),
        ("prompt_mean", prompt_mean_vector(model, prompt, layer)),
    ]

    rows = [_method_row(model, "vanilla", None, multiplier, eval_prompts, lexicon, layer)]
    prompted = [place_prompt(p, prompt, "input_prefix") for p in eval_prompts]
    rows.append(_method_row(model, "prompt", None, multiplier, prompted, lexicon, layer, len(prompt)))
    for name, vector in vectors:
        rows.append(_method_row(model, name, vector, multiplier, eval_prompts, lexicon, layer))
    for row in rows:
        logger.info("method_scored", method=row.method, score=round(row.behavior_score, 4))
    return rows


@dataclass
class ScaleRow:
    label: str
    value: int
    method: str
    behavior_score: float
    norm: float

    def to_record(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def data_scale_sweep(
    model: toymodel.ToyTransformer,
    corpus: BehaviorCorpus,
    sizes: Sequence[int],
    layer: int,
    method: str,
    multiplier: float,
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    sae: SaeParams | None = None,
    top_fraction: float = 0.35,
    include_decoder_bias: bool = True,
) -> list[ScaleRow]:
    """
    Behavior score of a vector built from the first n items, per n.

    Raises:
        InputError: If a size is not in [1, len(corpus)]
    """
    rows = []
    for n in sizes:
        if not 1 <= n <= len(corpus):
            raise InputError(f"Data size {n} outside [1, {len(corpus)}]", size=n)
        vector = build_vector(
            method, model, layer, corpus=corpus.head(n), sae=sae,
            top_fraction=top_fraction, include_decoder_bias=include_decoder_bias,
        )
        score = behavior_score(model, eval_prompts, _hook_for(vector, multiplier), lexicon)
        rows.append(ScaleRow("items", n, method, score, vector.norm))
        logger.info("data_scale_scored", n=n, method=method, score=round(score, 4))
    return rows


def layer_sweep(
    model: toymodel.ToyTransformer,
    corpus: BehaviorCorpus,
    layers: Sequence[int],
    multiplier: float,
    eval_prompts: Sequence[Sequence[int]],
    lexicon: BehaviorLexicon,
    saes: dict[int, SaeParams] | None = None,
    top_fraction: float = 0.35,
    include_decoder_bias: bool = True,
) -> list[ScaleRow]:
    """CAA behavior score per layer, plus STA where an SAE for that layer is given."""
    saes = saes or {}
    rows = []
    for layer in layers:
        caa = caa_vector(model, corpus, layer)
        rows.append(ScaleRow("layer", layer, "caa",
                             behavior_score(model, eval_prompts, _hook_for(caa, multiplier), lexicon),
                             caa.norm))
        if layer in saes:
            sta = build_vector(
                "sta", model, layer, corpus=corpus, sae=saes[layer],
                top_fraction=top_fraction, include_decoder_bias=include_decoder_bias,
            )
            rows.append(ScaleRow("layer", layer, "sta",
                                 behavior_score(model, eval_prompts, _hook_for(sta, multiplier), lexicon),
                                 sta.norm))
    return rows
