"""
Artifact persistence.

Every artifact is written atomically (temp file, fsync, rename) and gets a
sibling manifest recording its kind, format version, creation parameters,
the hash of its inputs and the SHA-256 of its bytes. Loading verifies the
manifest schema and the content hash before decoding.

JSON payloads use Python's shortest round-trip float repr, so model, SAE
and vector checkpoints reload bit for bit.
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import uuid
from collections.abc import AsyncIterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import aiofiles
import aiofiles.os
import numpy as np
import pandas as pd
import structlog
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from atom_steering.config import ToyModelConfig
from atom_steering.core import storage_keys
from atom_steering.core.numerics import DTYPE
from atom_steering.core.sae import SaeParams
from atom_steering.core.steering import SteeringVector
from atom_steering.core.toymodel import ToyTransformer, init_model
from atom_steering.errors import (
    ArtifactCorruptionError,
    ArtifactNotFoundError,
    ArtifactReadError,
    ArtifactWriteError,
    InputError,
    RunLockedError,
    SchemaVersionError,
)

logger = structlog.get_logger()

LOCK_ATTEMPTS = 5


# =============================================================================
# Manifest
# =============================================================================


@dataclass
class Manifest:
    """What an artifact is, what produced it and what its bytes hash to."""

    kind: str
    format_version: int
    content_hash: str
    inputs_hash: str = ""
    params: dict[str, Any] = field(default_factory=dict)
    created_at: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "format_version": self.format_version,
            "content_hash": self.content_hash,
            "inputs_hash": self.inputs_hash,
            "params": self.params,
        }

    @classmethod
    def from_envelope(cls, envelope: dict[str, Any]) -> Manifest:
        _, data = storage_keys.unwrap_metadata(envelope)
        return cls(
            kind=data["kind"],
            format_version=int(data["format_version"]),
            content_hash=data["content_hash"],
            inputs_hash=data.get("inputs_hash", ""),
            params=data.get("params", {}),
            created_at=envelope.get("_created_at"),
        )


# =============================================================================
# Atomic IO
# =============================================================================


async def atomic_write(path: Path, data: bytes | str) -> None:
    """
    Write data atomically using temp file + rename.

    Either the full file is written or nothing is.

    Raises:
        ArtifactWriteError: If the write fails
    """
    if isinstance(data, str):
        data = data.encode()
    await aiofiles.os.makedirs(path.parent, exist_ok=True)
    temp_path = path.parent / f".{path.name}.{uuid.uuid4().hex[:8]}.tmp"
    try:
        async with aiofiles.open(temp_path, "wb") as f:
            await f.write(data)
            await f.flush()
            os.fsync(f.fileno())
        if os.name == "nt" and path.exists():
            await aiofiles.os.remove(path)
        await aiofiles.os.rename(temp_path, path)
    except OSError as e:
        with contextlib.suppress(OSError):
            await aiofiles.os.remove(temp_path)
        raise ArtifactWriteError(str(path), str(e)) from e


async def read_bytes(path: Path) -> bytes:
    """
    Raises:
        ArtifactNotFoundError: If the file does not exist
        ArtifactReadError: If it cannot be read
    """
    if not path.exists():
        raise ArtifactNotFoundError(str(path))
    try:
        async with aiofiles.open(path, "rb") as f:
            return await f.read()
    except OSError as e:
        raise ArtifactReadError(str(path), str(e)) from e


async def write_artifact(
    path: Path,
    data: bytes | str,
    kind: str,
    params: dict[str, Any] | None = None,
    inputs_hash: str = "",
) -> Manifest:
    """Write an artifact and its manifest; returns the manifest."""
    payload = data.encode() if isinstance(data, str) else data
    manifest = Manifest(
        kind=kind,
        format_version=storage_keys.FORMAT_VERSIONS.get(kind, 1),
        content_hash=storage_keys.compute_hash(payload),
        inputs_hash=inputs_hash,
        params=params or {},
    )
    await atomic_write(path, payload)
    envelope = storage_keys.wrap_metadata(manifest.to_dict())
    await atomic_write(storage_keys.manifest_path(path), json.dumps(envelope, indent=2, sort_keys=True))
    logger.debug("artifact_written", path=str(path), kind=kind, bytes=len(payload))
    return manifest


async def read_manifest(path: Path) -> Manifest:
    """
    Load and schema-check the manifest of an artifact.

    Raises:
        ArtifactNotFoundError: If the manifest is missing
        ArtifactReadError: If it is not valid JSON or misses fields
        SchemaVersionError: If its schema version is unsupported
    """
    mpath = storage_keys.manifest_path(path)
    raw = await read_bytes(mpath)
    try:
        envelope = json.loads(raw)
        version, _ = storage_keys.unwrap_metadata(envelope)
    except (json.JSONDecodeError, InputError) as e:
        raise ArtifactReadError(str(mpath), str(e)) from e
    compatible, hint = storage_keys.check_schema_compatibility(version)
    if not compatible:
        raise SchemaVersionError(str(mpath), version, hint or "")
    try:
        return Manifest.from_envelope(envelope)
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactReadError(str(mpath), f"missing field {e}") from e


async def verify(path: Path, kind: str | None = None) -> tuple[Manifest, bytes]:
    """
    Read an artifact and check it against its manifest.

    Raises:
        ArtifactNotFoundError: If the artifact or its manifest is missing
        ArtifactCorruptionError: If the content hash does not match
        SchemaVersionError: If the manifest or payload format is unsupported
    """
    data = await read_bytes(path)
    manifest = await read_manifest(path)
    actual = storage_keys.compute_hash(data)
    if actual != manifest.content_hash:
        raise ArtifactCorruptionError(str(path), manifest.content_hash, actual)
    if kind is not None:
        compatible, hint = storage_keys.check_format_version(kind, manifest.format_version)
        if not compatible:
            raise SchemaVersionError(str(path), manifest.format_version, hint or "")
    return manifest, data


async def is_fresh(path: Path, inputs_hash: str) -> bool:
    """True when the artifact verifies and was built from the same inputs."""
    try:
        manifest, _ = await verify(path)
    except (ArtifactNotFoundError, ArtifactCorruptionError, ArtifactReadError, SchemaVersionError) as e:
        logger.debug("artifact_stale", path=str(path), reason=type(e).__name__)
        return False
    return manifest.inputs_hash == inputs_hash


# =============================================================================
# Codecs
# =============================================================================


def _tensor_json(t: torch.Tensor) -> dict[str, Any]:
    return {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}


def _json_tensor(data: dict[str, Any]) -> torch.Tensor:
    return torch.tensor(data["values"], dtype=DTYPE).reshape(data["shape"])


def _loads(path: Path, raw: bytes) -> dict[str, Any]:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ArtifactReadError(str(path), str(e)) from e


def _check_payload_version(path: Path, kind: str, data: dict[str, Any]) -> None:
    found = int(data.get("format_version", data.get("version", 0)))
    compatible, hint = storage_keys.check_format_version(kind, found)
    if not compatible:
        raise SchemaVersionError(str(path), found, hint or "")


def encode_model(model: ToyTransformer) -> bytes:
    payload = {
        "format_version": storage_keys.FORMAT_VERSIONS["model"],
        "config": model.config.model_dump(mode="json"),
        "weights": {name: _tensor_json(p) for name, p in model.named_parameters()},
    }
    return json.dumps(payload).encode()


def decode_model(path: Path, raw: bytes) -> ToyTransformer:
    data = _loads(path, raw)
    _check_payload_version(path, "model", data)
    model = init_model(ToyModelConfig(**data["config"]))
    try:
        state = {name: _json_tensor(w) for name, w in data["weights"].items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, RuntimeError) as e:
        raise ArtifactReadError(str(path), f"weights do not fit config: {e}") from e
    model.eval()
    return model


def encode_sae(params: SaeParams) -> bytes:
    payload = {
        "format_version": storage_keys.FORMAT_VERSIONS["sae"],
        "d_in": params.d_in,
        "d_sae": params.d_sae,
        "gamma": params.gamma,
        "bandwidth": params.bandwidth,
        "dataset_mean": params.dataset_mean.tolist() if params.dataset_mean is not None else None,
        "weights": {name: _tensor_json(t) for name, t in params.tensors().items()},
    }
    return json.dumps(payload).encode()


def decode_sae(path: Path, raw: bytes) -> SaeParams:
    data = _loads(path, raw)
    _check_payload_version(path, "sae", data)
    weights = {name: _json_tensor(w) for name, w in data["weights"].items()}
    mean = data.get("dataset_mean")
    return SaeParams(
        **weights,
        dataset_mean=None if mean is None else torch.tensor(mean, dtype=DTYPE),
        gamma=float(data["gamma"]),
        bandwidth=float(data["bandwidth"]),
    )


def encode_vector(vector: SteeringVector) -> bytes:
    return json.dumps(vector.to_dict(), indent=2).encode()


def decode_vector(path: Path, raw: bytes) -> SteeringVector:
    data = _loads(path, raw)
    _check_payload_version(path, "vector", data)
    try:
        return SteeringVector.from_dict(data)
    except (KeyError, ValueError) as e:
        raise ArtifactReadError(str(path), str(e)) from e


def encode_npy(t: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, t.detach().numpy(), allow_pickle=False)
    return buffer.getvalue()


def decode_npy(path: Path, raw: bytes) -> torch.Tensor:
    try:
        array = np.load(io.BytesIO(raw), allow_pickle=False)
    except ValueError as e:
        raise ArtifactReadError(str(path), str(e)) from e
    return torch.from_numpy(np.ascontiguousarray(array)).to(DTYPE)


def encode_frame(frame: pd.DataFrame) -> bytes:
    return frame.to_csv(index=False, lineterminator="\n").encode()


def encode_json(data: Any) -> bytes:
    return json.dumps(data, indent=2, sort_keys=True).encode()


# =============================================================================
# Typed save / load
# =============================================================================


async def save_model(path: Path, model: ToyTransformer, **manifest: Any) -> Manifest:
    return await write_artifact(path, encode_model(model), "model", **manifest)


async def load_model(path: Path) -> ToyTransformer:
    _, raw = await verify(path, "model")
    return decode_model(path, raw)


async def save_sae(path: Path, params: SaeParams, **manifest: Any) -> Manifest:
    return await write_artifact(path, encode_sae(params), "sae", **manifest)


async def load_sae(path: Path) -> SaeParams:
    _, raw = await verify(path, "sae")
    return decode_sae(path, raw)


async def save_vector(path: Path, vector: SteeringVector, **manifest: Any) -> Manifest:
    return await write_artifact(path, encode_vector(vector), "vector", **manifest)


async def load_vector(path: Path) -> SteeringVector:
    _, raw = await verify(path, "vector")
    return decode_vector(path, raw)


async def save_activations(path: Path, activations: torch.Tensor, **manifest: Any) -> Manifest:
    return await write_artifact(path, encode_npy(activations), "activations", **manifest)


async def load_activations(path: Path) -> torch.Tensor:
    _, raw = await verify(path, "activations")
    return decode_npy(path, raw)


async def load_text(path: Path, kind: str | None = None) -> str:
    _, raw = await verify(path, kind)
    return raw.decode()


# =============================================================================
# Run lock
# =============================================================================


@retry(
    retry=retry_if_exception_type(FileExistsError),
    stop=stop_after_attempt(LOCK_ATTEMPTS),
    wait=wait_exponential(multiplier=0.05, max=1.0),
    reraise=True,
)
async def _create_lock(path: Path) -> None:
    fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        os.write(fd, str(os.getpid()).encode())
    finally:
        os.close(fd)


@contextlib.asynccontextmanager
async def run_lock(run_dir: Path) -> AsyncIterator[Path]:
    """
    Own a run directory for the duration of the block.

    Raises:
        RunLockedError: If another run still holds the lock after retries
    """
    await aiofiles.os.makedirs(run_dir, exist_ok=True)
    path = storage_keys.lock_path(run_dir)
    try:
        await _create_lock(path)
    except FileExistsError:
        raise RunLockedError(str(path)) from None
    logger.debug("run_lock_acquired", path=str(path))
    try:
        yield path
    finally:
        with contextlib.suppress(OSError):
            await aiofiles.os.remove(path)
