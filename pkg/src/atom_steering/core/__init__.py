"""
Core components for atom-steering.

This package contains the numeric and modelling layers:
- numerics: float64 kernels shared by the model and the SAE
- toymodel: toy decoder-only transformer with residual steering
- sae: JumpReLU sparse autoencoder and its training
- steering: target-atom selection and steering vectors
- evaluation: behavior, fluency and sweep reports
- corpus / artifacts / storage_keys: data synthesis and persistence
"""

from atom_steering.core.corpus import (
    BehaviorCorpus,
    BehaviorItem,
    BehaviorLexicon,
    SyntheticData,
    synthesize,
)
from atom_steering.core.evaluation import (
    SweepReport,
    SweepRow,
    behavior_score,
    boundary_sweep,
    compare_methods,
    fluency_ngram,
    length_steering_eval,
    prompt_position_ablation,
)
from atom_steering.core.sae import (
    GradientCheckResult,
    SaeParams,
    SaeTrainingReport,
    decode,
    encode,
    gradient_check,
    train_sae,
)
from atom_steering.core.steering import (
    AtomStats,
    SelectionThresholds,
    SteeringVector,
    VectorMethod,
    build_vector,
    caa_vector,
    collect_atom_stats,
    select_target_atoms,
    sta_vector,
)
from atom_steering.core.toymodel import (
    ForwardTrace,
    SteerHook,
    ToyTransformer,
    generate,
    init_model,
    run,
    train_toy,
)

__all__ = [
    # Steering
    "AtomStats",
    # Corpus
    "BehaviorCorpus",
    "BehaviorItem",
    "BehaviorLexicon",
    # Toy model
    "ForwardTrace",
    # SAE
    "GradientCheckResult",
    "SaeParams",
    "SaeTrainingReport",
    "SelectionThresholds",
    "SteerHook",
    "SteeringVector",
    # Evaluation
    "SweepReport",
    "SweepRow",
    "SyntheticData",
    "ToyTransformer",
    "VectorMethod",
    "behavior_score",
    "boundary_sweep",
    "build_vector",
    "caa_vector",
    "collect_atom_stats",
    "compare_methods",
    "decode",
    "encode",
    "fluency_ngram",
    "generate",
    "gradient_check",
    "init_model",
    "length_steering_eval",
    "prompt_position_ablation",
    "run",
    "select_target_atoms",
    "sta_vector",
    "synthesize",
    "train_sae",
    "train_toy",
]
