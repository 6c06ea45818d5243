"""
Shared pytest fixtures for atom-steering tests.

Small configurations keep the default suite fast; the session-scoped
``trained_run`` fixture trains a reference-sized setup once for the tests
marked ``slow``; ``trained_runs`` repeats it for five root seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import pytest
import torch

if TYPE_CHECKING:
    from pathlib import Path

    from atom_steering.config import Settings
    from atom_steering.core.corpus import SyntheticData
    from atom_steering.core.sae import SaeParams
    from atom_steering.core.toymodel import ToyTransformer


# =============================================================================
# Configuration Fixtures
# =============================================================================


@pytest.fixture
def model_config():
    """A narrow two-layer model over the default vocabulary."""
    from atom_steering.config import ToyModelConfig

    return ToyModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=64, max_seq=64, seed=0)


@pytest.fixture
def corpus_config():
    """A corpus small enough to train on in a few steps."""
    from atom_steering.config import CorpusConfig

    return CorpusConfig(n_items=8, n_train_sequences=64, n_eval_prompts=4)


@pytest.fixture
def tiny_settings(tmp_path: Path) -> Settings:
    """Settings for a full pipeline run that finishes in seconds."""
    from atom_steering.config import (
        CorpusConfig,
        GenerationConfig,
        SaeTrainConfig,
        Settings,
        SweepConfig,
        ToyModelConfig,
        ToyTrainConfig,
    )

    return Settings(
        output_root=tmp_path / "runs",
        corpus=CorpusConfig(n_items=6, n_train_sequences=32, n_eval_prompts=2),
        model=ToyModelConfig(d_model=16),
        train=ToyTrainConfig(steps=2),
        sae=SaeTrainConfig(d_sae=32, steps=3, batch_size=16),
        generation=GenerationConfig(max_new=3, n_seeds=1),
        sweep=SweepConfig(lambdas=[0.0, 1.0], length_lambdas=[0.0], top_k=3),
    )


# Command-line overrides equivalent to tiny_settings.
TINY_OVERRIDES = [
    "corpus.n_items=6",
    "corpus.n_train_sequences=32",
    "corpus.n_eval_prompts=2",
    "model.d_model=16",
    "train.steps=2",
    "sae.d_sae=32",
    "sae.steps=3",
    "sae.batch_size=16",
    "generation.max_new=3",
    "generation.n_seeds=1",
    "sweep.lambdas=[0.0, 1.0]",
    "sweep.length_lambdas=[0.0]",
    "sweep.top_k=3",
]


@pytest.fixture
def tiny_overrides() -> list[str]:
    return [f"--set={item}" for item in TINY_OVERRIDES]


# =============================================================================
# Component Fixtures
# =============================================================================


@pytest.fixture
def model(model_config) -> ToyTransformer:
    """Freshly initialized narrow model."""
    from atom_steering.core.toymodel import init_model

    return init_model(model_config)


@pytest.fixture
def data(corpus_config) -> SyntheticData:
    """Synthetic corpus, lexicon and prompts for seed 0."""
    from atom_steering.core.corpus import synthesize

    return synthesize(corpus_config, seed=0)


@pytest.fixture
def small_sae(model_config) -> SaeParams:
    """Random SAE matching the narrow model."""
    from atom_steering.core.sae import random_params

    return random_params(model_config.d_model, 32, seed=0, threshold_scale=0.05)


@pytest.fixture
def log_capture():
    """Captured structlog events."""
    import structlog

    with structlog.testing.capture_logs() as logs:
        yield logs


# =============================================================================
# Trained Setup (slow)
# =============================================================================


@dataclass
class TrainedRun:
    model: ToyTransformer
    data: SyntheticData
    sae: SaeParams
    layer: int
    sae_report: object


REFERENCE_ROOTS = (0, 1, 2, 3, 4)


def train_setup(corpus_seed: int, model_seed: int, sae_seed: int) -> TrainedRun:
    """Toy model and SAE trained at reference width on a reduced corpus."""
    from atom_steering.config import CorpusConfig, SaeTrainConfig, ToyModelConfig
    from atom_steering.core.corpus import synthesize
    from atom_steering.core.sae import train_sae
    from atom_steering.core.toymodel import init_model, residual_activations, train_toy

    torch.use_deterministic_algorithms(True)
    data = synthesize(CorpusConfig(n_train_sequences=512), seed=corpus_seed)
    model = init_model(ToyModelConfig(seed=model_seed))
    train_toy(model, data.lm_sequences, steps=300, lr=3e-3)
    layer = 1
    acts = residual_activations(model, data.lm_sequences, layer)
    sae, report = train_sae(
        acts,
        SaeTrainConfig(
            d_sae=256, gamma=0.01, bandwidth=0.05, lr=5e-3, steps=1500, optimizer="adam", seed=sae_seed
        ),
    )
    return TrainedRun(model=model, data=data, sae=sae, layer=layer, sae_report=report)


@pytest.fixture(scope="session")
def trained_run() -> TrainedRun:
    """Reference setup with every seed at 0."""
    return train_setup(0, 0, 0)


@pytest.fixture(scope="session")
def trained_runs() -> list[TrainedRun]:
    """Reference setups for five root seeds, split per stage like the pipeline does."""
    from atom_steering.config import Settings
    from atom_steering.pipeline import stage_seed

    runs = []
    for root in REFERENCE_ROOTS:
        settings = Settings(root_seed=root)
        seeds = (stage_seed(settings, label) for label in ("corpus", "model", "sae"))
        runs.append(train_setup(*seeds))
    return runs
