"""
Error definitions for atom-steering.

This module defines the error hierarchy used throughout the package.
Every error carries a stable code so the CLI can map failures onto
exit codes and log them with structured context.
"""

from __future__ import annotations

from datetime import UTC, datetime
from typing import Any


class AtomSteeringError(Exception):
    """
    Base exception for all atom-steering errors.

    Attributes:
        code: Error code (e.g., "AST-1001")
        context: Additional context for debugging
        cause: Original exception if wrapping another error
        timestamp: When the error occurred
    """

    code: str = "AST-9999"
    retryable: bool = False

    def __init__(
        self,
        message: str,
        code: str | None = None,
        context: dict[str, Any] | None = None,
        cause: Exception | None = None,
    ):
        super().__init__(message)
        self.code = code or self.__class__.code
        self.context = context or {}
        self.cause = cause
        self.timestamp = datetime.now(UTC)

    def to_dict(self) -> dict[str, Any]:
        """Serialize for command output."""
        return {
            "error": self.__class__.__name__,
            "message": str(self),
            "code": self.code,
            "retryable": self.retryable,
        }

    def to_log_dict(self) -> dict[str, Any]:
        """Full context for logging."""
        return {
            **self.to_dict(),
            "context": self.context,
            "cause": str(self.cause) if self.cause else None,
            "timestamp": self.timestamp.isoformat(),
        }


# =============================================================================
# Validation Errors (AST-1xxx)
# =============================================================================


class ValidationError(AtomSteeringError):
    """Base class for validation errors."""

    code = "AST-1000"


class ParameterError(ValidationError):
    """A scalar parameter is outside its allowed range."""

    code = "AST-1001"

    def __init__(self, param_name: str, reason: str):
        super().__init__(
            f"Invalid parameter '{param_name}': {reason}",
            context={"param_name": param_name, "reason": reason},
        )
        self.param_name = param_name


class DimensionError(ValidationError):
    """Tensor shapes do not agree."""

    code = "AST-1002"

    def __init__(self, operation: str, left: tuple[int, ...], right: tuple[int, ...]):
        super().__init__(
            f"Dimension mismatch in {operation}: {list(left)} vs {list(right)}",
            context={"operation": operation, "left": list(left), "right": list(right)},
        )
        self.left = tuple(left)
        self.right = tuple(right)


class InputError(ValidationError):
    """Input data is empty, overlong, or out of vocabulary."""

    code = "AST-1003"

    def __init__(self, message: str, **context: Any):
        super().__init__(message, context=context)


class ConfigurationError(ValidationError):
    """Components are incompatible with each other (model, SAE, vector, lexicon)."""

    code = "AST-1004"

    def __init__(self, message: str, **context: Any):
        super().__init__(message, context=context)


class DegenerateInputError(ValidationError):
    """Input collapses to a zero direction or an identical contrast."""

    code = "AST-1005"

    def __init__(self, message: str, **context: Any):
        super().__init__(message, context=context)


class LexiconOverlapError(ValidationError):
    """Positive and negative lexicons share tokens."""

    code = "AST-1006"

    def __init__(self, overlap: list[int]):
        super().__init__(
            f"Lexicons overlap on tokens: {sorted(overlap)}",
            context={"overlap": sorted(overlap)},
        )


# =============================================================================
# Not Found Errors (AST-2xxx)
# =============================================================================


class NotFoundError(AtomSteeringError):
    """Base class for resource not found errors."""

    code = "AST-2000"


class ArtifactNotFoundError(NotFoundError):
    """Referenced artifact file doesn't exist."""

    code = "AST-2001"

    def __init__(self, path: str):
        super().__init__(
            f"Artifact not found: {path}",
            context={"path": path},
        )
        self.path = path


# =============================================================================
# State Errors (AST-3xxx)
# =============================================================================


class StateError(AtomSteeringError):
    """Base class for run state errors."""

    code = "AST-3000"


class RunLockedError(StateError):
    """Another run owns the output directory."""

    code = "AST-3001"
    retryable = True

    def __init__(self, lock_path: str):
        super().__init__(
            f"Output directory is locked by another run: {lock_path}",
            context={"lock_path": lock_path},
        )


# =============================================================================
# Storage Errors (AST-4xxx)
# =============================================================================


class StorageError(AtomSteeringError):
    """Base class for artifact storage errors."""

    code = "AST-4000"


class ArtifactWriteError(StorageError):
    """Failed to write an artifact."""

    code = "AST-4001"
    retryable = True

    def __init__(self, path: str, details: str = ""):
        super().__init__(
            f"Failed to write artifact: {path}",
            context={"path": path, "details": details},
        )


class ArtifactReadError(StorageError):
    """Failed to read or parse an artifact."""

    code = "AST-4002"

    def __init__(self, path: str, details: str = ""):
        super().__init__(
            f"Failed to read artifact: {path}" + (f" ({details})" if details else ""),
            context={"path": path, "details": details},
        )


class ArtifactCorruptionError(StorageError):
    """Content hash does not match the manifest."""

    code = "AST-4004"

    def __init__(self, path: str, expected: str, actual: str):
        super().__init__(
            f"Hash mismatch for {path}: manifest {expected[:12]}, file {actual[:12]}",
            context={"path": path, "expected": expected, "actual": actual},
        )
        self.path = path


class SchemaVersionError(StorageError):
    """Stored format version is not supported."""

    code = "AST-4005"

    def __init__(self, path: str, found: int, hint: str):
        super().__init__(
            f"Unsupported format version {found} in {path}. {hint}",
            context={"path": path, "found": found, "hint": hint},
        )
        self.hint = hint


# =============================================================================
# Internal Errors (AST-9xxx)
# =============================================================================


class InternalError(AtomSteeringError):
    """Unexpected internal error."""

    code = "AST-9001"

    def __init__(self, message: str = "An internal error occurred"):
        super().__init__(message)


class StageFailedError(AtomSteeringError):
    """A pipeline stage failed."""

    code = "AST-9002"

    def __init__(self, stage: str, cause: Exception):
        super().__init__(
            f"Stage '{stage}' failed: {cause}",
            context={"stage": stage, "cause_code": getattr(cause, "code", None)},
            cause=cause,
        )
        self.stage = stage


# =============================================================================
# Error Handling Utilities
# =============================================================================


def classify_error(error: Exception) -> AtomSteeringError:
    """
    Convert any exception into an appropriate AtomSteeringError.

    This keeps every failure reported by the CLI in one format.
    """
    if isinstance(error, AtomSteeringError):
        return error

    error_type = type(error).__name__
    error_msg = str(error)

    if isinstance(error, FileNotFoundError):
        return ArtifactNotFoundError(str(error.filename or error_msg))
    if isinstance(error, OSError):
        return StorageError(f"I/O error: {error_msg}")
    if isinstance(error, MemoryError):
        return InternalError("Out of memory")

    return InternalError(f"Unexpected error: {error_type}: {error_msg}")


def exit_code_for(error: BaseException | None) -> int:
    """Map an outcome onto the CLI exit code: 0 ok, 1 validation, 2 runtime."""
    if error is None:
        return 0
    if isinstance(error, StageFailedError) and error.cause is not None:
        error = error.cause
    if isinstance(error, ValidationError | ArtifactNotFoundError):
        return 1
    return 2


def format_user_message(error: AtomSteeringError) -> str:
    """Format an error message for the terminal, with a hint where one helps."""
    hints = {
        "AST-1002": "Check that the vector, SAE and model were built for the same layer width.",
        "AST-1004": "Rebuild the incompatible artifact against the current model.",
        "AST-2001": "Run the producing command first, or pass the correct path.",
        "AST-3001": "Wait for the other run to finish or remove a stale .lock file.",
        "AST-4004": "The file changed after it was written; rebuild it.",
    }
    hint = hints.get(error.code)
    return f"{error} [{error.code}]" + (f"\n  hint: {hint}" if hint else "")


class ErrorContext:
    """
    Context manager for error handling with automatic logging and classification.

    Usage:
        with ErrorContext("train_sae", logger=logger, layer=layer):
            # ... code that might raise ...
    """

    def __init__(self, operation: str, logger=None, **context):
        """
        Initialize error context.

        Args:
            operation: Name of the operation for error messages
            logger: Optional logger instance
            **context: Additional context to include in errors
        """
        self.operation = operation
        self.context = context
        self._logger = logger

    def _handle(self, exc_val: BaseException | None) -> None:
        if exc_val is None or not isinstance(exc_val, Exception):
            return

        classified = classify_error(exc_val)
        classified.context.update(self.context)
        classified.context["operation"] = self.operation

        if self._logger:
            self._logger.error(
                f"Error in {self.operation}",
                error_code=classified.code,
                **classified.context,
            )

        if classified is not exc_val:
            raise classified from exc_val

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self._handle(exc_val)
        return False

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        self._handle(exc_val)
        return False
