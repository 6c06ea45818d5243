"""
Centralized artifact naming, hashing and schema versioning.

This module provides:
- Artifact file names inside a run directory
- Run-name validation
- Format and manifest schema versions
- Canonical hashing of creation inputs and artifact bytes

Every path and manifest the package writes goes through this module so
names and versions stay consistent across commands and pipeline stages.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from datetime import UTC, datetime
from pathlib import Path
from typing import Any, Final

from atom_steering.errors import InputError

# =============================================================================
# Schema Versioning
# =============================================================================

# Manifest envelope version. Increment when the manifest layout changes.
METADATA_SCHEMA_VERSION: Final[int] = 1

# Oldest manifest version this build can still read.
MIN_SUPPORTED_SCHEMA_VERSION: Final[int] = 1

# Per-artifact payload format versions.
FORMAT_VERSIONS: Final[dict[str, int]] = {
    "corpus": 1,
    "lexicon": 1,
    "sequences": 1,
    "model": 1,
    "activations": 1,
    "sae": 1,
    "vector": 1,
    "report": 1,
}

MANIFEST_SUFFIX: Final[str] = ".manifest.json"
LOCK_NAME: Final[str] = ".lock"


# =============================================================================
# File Names
# =============================================================================

# Default file name of each artifact kind inside a run directory.
ARTIFACT_FILES: Final[dict[str, str]] = {
    "corpus": "corpus.jsonl",
    "lexicon": "lexicon.json",
    "sequences": "lm_corpus.jsonl",
    "eval_prompts": "eval_prompts.jsonl",
    "length_pair": "length_pair.jsonl",
    "length_probes": "length_probes.jsonl",
    "model": "model.json",
    "activations": "activations.npy",
    "sae": "sae.json",
    "vector": "vector.json",
    "caa_vector": "caa_vector.json",
    "sweep_csv": "sweep.csv",
    "sweep_json": "sweep.json",
    "methods_csv": "methods.csv",
    "length_csv": "length.csv",
    "ablation_csv": "prompt_ablation.csv",
    "shots_csv": "shots.csv",
    "data_scale_csv": "data_scale.csv",
    "layers_csv": "layers.csv",
}

RUN_NAME_PATTERN: Final[re.Pattern] = re.compile(r"^[a-zA-Z0-9_-]{1,64}$")


def validate_run_name(value: str) -> str:
    """
    Normalize and validate a run directory name.

    Raises:
        InputError: If the name is empty or contains path characters
    """
    value = unicodedata.normalize("NFKC", (value or "").strip())
    if not value:
        raise InputError("Run name cannot be empty")
    if not RUN_NAME_PATTERN.match(value):
        raise InputError(
            f"Invalid run name {value!r}. Use ASCII letters, numbers, hyphens and underscores.",
            run_name=value,
        )
    return value


def artifact_path(run_dir: Path, kind: str) -> Path:
    """Default location of an artifact kind inside a run directory."""
    try:
        return run_dir / ARTIFACT_FILES[kind]
    except KeyError:
        raise InputError(f"Unknown artifact kind: {kind}", kind=kind) from None


def manifest_path(path: Path) -> Path:
    """``model.json`` -> ``model.json.manifest.json``."""
    return path.with_name(path.name + MANIFEST_SUFFIX)


def lock_path(run_dir: Path) -> Path:
    return run_dir / LOCK_NAME


# =============================================================================
# Hashing
# =============================================================================


def canonical_json(data: Any) -> str:
    """Key-sorted compact JSON, the stable form used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def compute_hash(data: bytes | str) -> str:
    """SHA-256 hex digest of bytes or UTF-8 text."""
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def inputs_hash(params: dict[str, Any], upstream: dict[str, str] | None = None) -> str:
    """Hash of a stage's creation parameters and the content hashes it consumed."""
    return compute_hash(canonical_json({"params": params, "upstream": upstream or {}}))


# =============================================================================
# Metadata Envelope
# =============================================================================


def wrap_metadata(data: dict, created_at: str | None = None) -> dict:
    """Wrap a manifest payload with schema version and timestamp."""
    return {
        "_schema_version": METADATA_SCHEMA_VERSION,
        "_created_at": created_at or datetime.now(UTC).isoformat(),
        **data,
    }


def unwrap_metadata(envelope: dict) -> tuple[int, dict]:
    """
    Split an envelope into its schema version and payload.

    Raises:
        InputError: If the envelope is malformed
    """
    if not isinstance(envelope, dict):
        raise InputError("Manifest must be a JSON object")
    schema_version = envelope.get("_schema_version", 0)
    if not isinstance(schema_version, int):
        raise InputError(f"Invalid schema version type: {type(schema_version).__name__}")
    data = {k: v for k, v in envelope.items() if not k.startswith("_")}
    return schema_version, data


def check_schema_compatibility(stored_version: int) -> tuple[bool, str | None]:
    """Return (compatible, migration hint)."""
    if stored_version < MIN_SUPPORTED_SCHEMA_VERSION:
        return False, (
            f"Minimum supported version is {MIN_SUPPORTED_SCHEMA_VERSION}; "
            "rebuild the artifact with this release."
        )
    if stored_version > METADATA_SCHEMA_VERSION:
        return False, (
            f"This build reads up to version {METADATA_SCHEMA_VERSION}; "
            "upgrade atom-steering to load it."
        )
    return True, None


def check_format_version(kind: str, found: int) -> tuple[bool, str | None]:
    """Same contract as check_schema_compatibility, for an artifact payload."""
    current = FORMAT_VERSIONS.get(kind, 1)
    if found == current:
        return True, None
    if found < current:
        return False, f"Rebuild the {kind} artifact; format {found} predates {current}."
    return False, f"Upgrade atom-steering; {kind} format {found} is newer than {current}."
