"""
Configuration management for atom-steering.

Supports:
- Environment variables (one prefix per section)
- TOML run files with dotted command-line overrides
- Pydantic validation
"""

from __future__ import annotations

import hashlib
import tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from atom_steering.errors import (
    ArtifactNotFoundError,
    ConfigurationError,
    InputError,
    LexiconOverlapError,
    ParameterError,
)

# Reserved token ids shared by every vocabulary.
PAD, BOS, EOS, SPACE = 0, 1, 2, 3
N_RESERVED = 4


class CorpusConfig(BaseSettings):
    """Synthetic behavior grammar. Token ranges are half-open [start, stop)."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_CORPUS_")

    behavior_name: str = Field(default="safety", description="Label for the two-behavior corpus")
    question_tokens: tuple[int, int] = Field(default=(4, 24))
    positive_tokens: tuple[int, int] = Field(default=(24, 32))
    negative_tokens: tuple[int, int] = Field(default=(32, 40))
    prompt_tokens: tuple[int, int] = Field(default=(40, 44))
    reasoning_question_tokens: tuple[int, int] = Field(default=(44, 52))
    long_tokens: tuple[int, int] = Field(default=(52, 58))
    short_tokens: tuple[int, int] = Field(default=(58, 64))

    question_length: tuple[int, int] = Field(default=(3, 6), description="Inclusive length range")
    answer_length: tuple[int, int] = Field(default=(2, 5))
    long_length: tuple[int, int] = Field(default=(8, 14))
    short_length: tuple[int, int] = Field(default=(2, 3))

    n_items: int = Field(default=64, description="Contrast triples in the behavior corpus")
    n_train_sequences: int = Field(default=1024, ge=1)
    n_eval_prompts: int = Field(default=16, ge=1)
    prompt_fraction: float = Field(
        default=0.25, ge=0.0, le=1.0,
        description="Share of behavior training sequences carrying the prompt prefix",
    )
    reasoning_fraction: float = Field(default=0.4, ge=0.0, le=1.0)

    @field_validator(
        "question_tokens", "positive_tokens", "negative_tokens", "prompt_tokens",
        "reasoning_question_tokens", "long_tokens", "short_tokens",
    )
    @classmethod
    def check_range(cls, v: tuple[int, int]) -> tuple[int, int]:
        """Token ranges must be non-empty and avoid the reserved ids."""
        start, stop = v
        if start < N_RESERVED or stop <= start:
            raise ValueError(f"token range {v} must satisfy {N_RESERVED} <= start < stop")
        return v

    @field_validator("question_length", "answer_length", "long_length", "short_length")
    @classmethod
    def check_length(cls, v: tuple[int, int]) -> tuple[int, int]:
        """Length ranges are inclusive and at least one token long."""
        if v[0] < 1 or v[1] < v[0]:
            raise ValueError(f"length range {v} must satisfy 1 <= min <= max")
        return v

    @field_validator("n_items")
    @classmethod
    def check_items(cls, v: int) -> int:
        """An empty corpus is rejected."""
        if v < 1:
            raise InputError("Corpus must request at least one item", n_items=v)
        return v

    @model_validator(mode="after")
    def check_disjoint(self) -> CorpusConfig:
        """Positive and negative lexicons must not share tokens."""
        overlap = set(range(*self.positive_tokens)) & set(range(*self.negative_tokens))
        if overlap:
            raise LexiconOverlapError(sorted(overlap))
        return self

    def max_token(self) -> int:
        """Largest token id the grammar can emit."""
        ranges = (
            self.question_tokens, self.positive_tokens, self.negative_tokens, self.prompt_tokens,
            self.reasoning_question_tokens, self.long_tokens, self.short_tokens,
        )
        return max(stop for _, stop in ranges) - 1


class ToyModelConfig(BaseSettings):
    """Shape of the toy decoder-only transformer."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_MODEL_")

    vocab_size: int = Field(default=64)
    d_model: int = Field(default=64)
    n_layers: int = Field(default=2)
    n_heads: int = Field(default=2)
    max_seq: int = Field(default=64)
    d_mlp: int | None = Field(default=None, description="Defaults to 4 * d_model")
    ln_eps: float = Field(default=1e-5)
    seed: int = Field(default=0)

    @model_validator(mode="after")
    def check_shape(self) -> ToyModelConfig:
        """Reserved tokens must fit and d_model must split evenly across heads."""
        if self.vocab_size < N_RESERVED:
            raise ParameterError("vocab_size", f"must be >= {N_RESERVED}, got {self.vocab_size}")
        for name in ("d_model", "n_layers", "n_heads"):
            if getattr(self, name) < 1:
                raise ParameterError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.max_seq < 2:
            raise ParameterError("max_seq", f"must be >= 2, got {self.max_seq}")
        if self.ln_eps <= 0:
            raise ParameterError("ln_eps", "must be positive")
        if self.d_model % self.n_heads != 0:
            raise ParameterError(
                "n_heads", f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self

    @property
    def mlp_width(self) -> int:
        return self.d_mlp or 4 * self.d_model


class ToyTrainConfig(BaseSettings):
    """Toy-model language-model training."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_TRAIN_")

    steps: int = Field(default=400, ge=1)
    lr: float = Field(default=3e-3, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    log_every: int = Field(default=50, ge=1)


class SaeTrainConfig(BaseSettings):
    """JumpReLU SAE training."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_SAE_")

    d_sae: int = Field(default=256, ge=1)
    gamma: float = Field(default=0.01, description="Sparsity weight")
    bandwidth: float = Field(default=0.001, gt=0.0, description="STE rectangle width")
    lr: float = Field(default=1e-3, ge=0.0)
    steps: int = Field(default=500, ge=0)
    batch_size: int = Field(default=256, ge=1)
    optimizer: Literal["sgd", "adam"] = Field(default="sgd")
    initial_threshold: float = Field(default=0.001, gt=0.0)
    seed: int = Field(default=0)
    log_every: int = Field(default=100, ge=1)


class SteeringConfig(BaseSettings):
    """Steering vector construction and application."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_STEERING_")

    layer: int = Field(default=1, ge=0)
    method: Literal["caa", "sta", "axbench", "prompt-caa", "prompt-sta"] = Field(default="sta")
    top_fraction: float = Field(default=0.35, gt=0.0, le=1.0)
    include_decoder_bias: bool = Field(default=True)
    match_magnitude: bool = Field(default=True, description="Rescale SAE vectors to the CAA norm")
    multiplier: float = Field(default=1.0)


class GenerationConfig(BaseSettings):
    """Sampling parameters for steered generation."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_GEN_")

    max_new: int = Field(default=24, ge=1)
    temperature: float = Field(default=0.8, ge=0.0)
    n_seeds: int = Field(default=5, ge=1)


class SweepConfig(BaseSettings):
    """Boundary and analysis sweeps."""

    model_config = SettingsConfigDict(env_prefix="ATOM_STEER_SWEEP_")

    lambdas: list[float] = Field(default=[-10.0, -8.0, -2.0, -1.0, 0.0, 1.0, 2.0, 6.0, 10.0])
    length_lambdas: list[float] = Field(default=[-2.0, 0.0, 2.0])
    top_k: int = Field(default=5, ge=1)
    fluency_n: int = Field(default=2, ge=1)
    max_workers: int = Field(default=1, ge=1)
    data_sizes: list[int] = Field(default=[4, 8, 16, 32, 64], description="Corpus prefixes for the data-scale report")
    shots: list[int] = Field(default=[0, 1, 2, 3], description="Demonstration counts for the few-shot report")
    layers: list[int] = Field(default_factory=list, description="Layers for the layer report; empty means every layer")


class Settings(BaseSettings):
    """Main application settings; a run configuration when loaded from a file."""

    model_config = SettingsConfigDict(
        env_prefix="ATOM_STEER_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
    )

    output_root: Path = Field(
        default=Path("runs"),
        description="Root directory for run outputs",
    )
    root_seed: int = Field(default=0)

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(default="INFO")
    log_format: Literal["json", "console"] = Field(default="console")

    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ToyModelConfig = Field(default_factory=ToyModelConfig)
    train: ToyTrainConfig = Field(default_factory=ToyTrainConfig)
    sae: SaeTrainConfig = Field(default_factory=SaeTrainConfig)
    steering: SteeringConfig = Field(default_factory=SteeringConfig)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @field_validator("output_root", mode="before")
    @classmethod
    def expand_output_root(cls, v: str | Path) -> Path:
        """Expand user home directory in paths."""
        return Path(v).expanduser()

    @model_validator(mode="after")
    def check_compatibility(self) -> Settings:
        """Dimensional compatibility is validated before any compute."""
        if self.steering.layer >= self.model.n_layers:
            raise ConfigurationError(
                f"steering.layer {self.steering.layer} out of range for {self.model.n_layers} layers",
                layer=self.steering.layer,
            )
        if self.corpus.max_token() >= self.model.vocab_size:
            raise ConfigurationError(
                f"corpus emits token {self.corpus.max_token()} but vocab_size is {self.model.vocab_size}",
                vocab_size=self.model.vocab_size,
            )
        if self.sae.d_sae <= self.model.d_model:
            raise ConfigurationError(
                f"sae.d_sae ({self.sae.d_sae}) must exceed d_model ({self.model.d_model})",
                d_sae=self.sae.d_sae,
            )
        return self

    def fingerprint(self, *sections: str) -> dict[str, Any]:
        """JSON-ready dump of the named sections (all when none given)."""
        data = self.model_dump(mode="json")
        if not sections:
            return data
        return {name: data[name] for name in sections}


def derive_seed(root_seed: int, label: str) -> int:
    """Split the root seed into a per-stage seed keyed by a stable label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def _coerce(raw: str) -> Any:
    """Parse a CLI override value with TOML scalar rules, falling back to a string."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """
    Apply dotted ``section.key=value`` overrides onto a nested dict.

    Raises:
        InputError: If an override is malformed
    """
    for item in overrides:
        if "=" not in item:
            raise InputError(f"Override must look like key=value: {item!r}", override=item)
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise InputError(f"Override has an empty key: {item!r}", override=item)
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"Override path crosses a scalar: {key}", override=item)
        node[parts[-1]] = _coerce(raw.strip())
    return data


def load_settings(
    config_path: Path | None = None,
    overrides: list[str] | None = None,
) -> Settings:
    """
    Load settings from environment, an optional TOML file and CLI overrides.

    File values and overrides are passed as init values, so they take
    precedence over the environment.

    Raises:
        ArtifactNotFoundError: If the config file doesn't exist
        InputError: If the config file is not valid TOML
    """
    data: dict[str, Any] = {}
    if config_path is not None:
        if not config_path.exists():
            raise ArtifactNotFoundError(str(config_path))
        try:
            data = dict(TomlConfigSettingsSource(Settings, toml_file=config_path)())
        except tomllib.TOMLDecodeError as e:
            raise InputError(f"Config file is not valid TOML: {e}", path=str(config_path)) from e
    if overrides:
        data = apply_overrides(data, overrides)
    return Settings(**data)

