"""
Command-line surface for atom-steering.

Usage:
    atom-steer [--config FILE] [--set k=v ...] [--output-dir DIR] <command> [flags]

Command flags are shorthands for ``--set`` overrides (``--gamma 0.1`` is
``--set sae.gamma=0.1``), so every command sees one validated Settings
object. Artifacts live in the run directory under fixed names.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import pydantic
import structlog
import torch

from atom_steering.config import BOS, SPACE, Settings, load_settings
from atom_steering.core import artifacts, corpus, evaluation, sae, storage_keys, toymodel
from atom_steering.errors import (
    AtomSteeringError,
    ArtifactNotFoundError,
    ErrorContext,
    InputError,
    classify_error,
    exit_code_for,
    format_user_message,
)
from atom_steering.monitoring import configure_logging, trace_stage
from atom_steering.pipeline import STAGE_INPUTS, STAGES, Pipeline

logger = structlog.get_logger()

GRAD_CHECK_TOLERANCE = 1e-5

# argparse dest -> dotted settings key
FLAG_OVERRIDES: dict[str, str] = {
    "seed": "root_seed",
    "n_items": "corpus.n_items",
    "toy_steps": "train.steps",
    "layer": "steering.layer",
    "gamma": "sae.gamma",
    "sae_steps": "sae.steps",
    "optimizer": "sae.optimizer",
    "method": "steering.method",
    "top_fraction": "steering.top_fraction",
    "decoder_bias": "steering.include_decoder_bias",
    "match": "steering.match_magnitude",
    "lam": "steering.multiplier",
    "temperature": "generation.temperature",
    "lambdas": "sweep.lambdas",
    "length_lambdas": "sweep.length_lambdas",
    "max_workers": "sweep.max_workers",
}


# =============================================================================
# Argument parsing
# =============================================================================


def _float_list(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from e


def _token_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected token ids, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atom-steer", description="Steering target atoms on a toy transformer")
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted settings override, repeatable")
    parser.add_argument("--run", dest="run_name", help="Run name under output_root")
    parser.add_argument("--output-dir", type=Path, help="Run directory (overrides --run)")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="Synthesize the behavior corpus, lexicon and LM corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-items", type=int)
    _add_force(p)

    p = sub.add_parser("train-toy", help="Train the toy transformer on the LM corpus")
    p.add_argument("--steps", dest="toy_steps", type=int)
    _add_force(p)

    p = sub.add_parser("dump-activations", help="Collect residual activations at the steering layer")
    p.add_argument("--layer", type=int)
    _add_force(p)

    p = sub.add_parser("train-sae", help="Train the JumpReLU SAE on dumped activations")
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", dest="sae_steps", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    _add_force(p)

    p = sub.add_parser("grad-check", help="Finite-difference check of the SAE gradients")
    p.add_argument("--rows", type=int, default=16, help="Activation rows to check on")
    p.add_argument("--gamma", type=float)
    p.add_argument("--tolerance", type=float, default=GRAD_CHECK_TOLERANCE)

    p = sub.add_parser("build-vector", help="Build a steering vector")
    p.add_argument("--method", choices=["caa", "sta", "axbench", "prompt-caa", "prompt-sta"])
    p.add_argument("--layer", type=int)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--no-decoder-bias", dest="decoder_bias", action="store_false", default=None)
    p.add_argument("--no-match", dest="match", action="store_false", default=None)
    _add_force(p)

    p = sub.add_parser("steer", help="Generate from one question with the vector applied")
    p.add_argument("--lam", type=float, help="Steering multiplier (default 1)")
    p.add_argument("--question", type=_token_list, help="Question token ids (default: first eval prompt)")
    p.add_argument("--model", type=Path, help="Model checkpoint (default: run model)")
    p.add_argument("--vector", type=Path, help="Vector file (default: run vector)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0, help="Sampling seed")

    p = sub.add_parser("sweep", help="Boundary sweep, method table, length and prompt-position reports")
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--length-lambdas", type=_float_list)
    p.add_argument("--max-workers", type=int)
    _add_force(p)

    sub.add_parser("prompt-ablation", help="Behavior score per prompt placement")

    p = sub.add_parser("length-sweep", help="Steer reasoning length with a long/short contrast pair")
    p.add_argument("--lambdas", dest="length_lambdas", type=_float_list)
    p.add_argument("--max-workers", type=int)

    p = sub.add_parser("pipeline", help="Run every stage, skipping those already up to date")
    _add_force(p)
    return parser


def _add_force(p: argparse.ArgumentParser) -> None:
    p.add_argument("--force", action="store_true", help="Rebuild even when outputs are fresh")


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def flag_overrides(args: argparse.Namespace) -> list[str]:
    """Translate command flags into dotted settings overrides."""
    overrides = []
    for dest, key in FLAG_OVERRIDES.items():
        if args.command == "steer" and dest == "seed":
            continue
        value = getattr(args, dest, None)
        if value is not None:
            overrides.append(f"{key}={_toml_value(value)}")
    return overrides


# =============================================================================
# Helpers
# =============================================================================


def _emit(summary: dict[str, Any]) -> None:
    for key, value in summary.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}: {value}")


def require(*paths: Path) -> None:
    """Fail before computing when an input artifact is missing."""
    for path in paths:
        if not path.exists():
            raise ArtifactNotFoundError(str(path))


def run_dir_for(args: argparse.Namespace, settings: Settings) -> Path:
    """--output-dir wins, then output_root/--run, then output_root itself."""
    run_name = None if args.run_name is None else storage_keys.validate_run_name(args.run_name)
    if args.output_dir is not None:
        return args.output_dir
    if run_name:
        return settings.output_root / run_name
    return settings.output_root


# =============================================================================
# Commands
# =============================================================================


async def cmd_stage(stage: str, settings: Settings, run_dir: Path, force: bool) -> dict[str, Any]:
    pipeline = Pipeline(settings, run_dir, force=force)
    require(*(pipeline.path(kind) for kind in STAGE_INPUTS[stage]))
    result = await pipeline.run((stage,))
    outcome = result.outcomes[0]
    return {"stage": stage, "skipped": outcome.skipped, "outputs": ", ".join(outcome.outputs), **outcome.summary}


async def cmd_build_vector(settings: Settings, run_dir: Path, force: bool) -> dict[str, Any]:
    summary = await cmd_stage("build-vector", settings, run_dir, force)
    vector = await artifacts.load_vector(storage_keys.artifact_path(run_dir, "vector"))
    summary.update(
        method=vector.method.value,
        layer=vector.layer,
        norm=vector.norm,
        n_atoms=vector.n_atoms,
        alpha=vector.alpha,
        beta=vector.beta,
        top_fraction=vector.top_fraction,
        degenerate=vector.degenerate,
    )
    return summary


async def cmd_grad_check(settings: Settings, run_dir: Path, rows: int, tolerance: float) -> dict[str, Any]:
    sae_path = storage_keys.artifact_path(run_dir, "sae")
    acts_path = storage_keys.artifact_path(run_dir, "activations")
    require(sae_path, acts_path)
    if rows < 1:
        raise InputError("grad-check needs at least one row", rows=rows)
    params = await artifacts.load_sae(sae_path)
    acts = await artifacts.load_activations(acts_path)
    with trace_stage("grad-check", rows=rows) as result:
        check = await asyncio.to_thread(sae.gradient_check, params, acts[:rows], settings.sae)
        result.update(check.to_dict())
    return {**check.to_dict(), "tolerance": tolerance, "passed": check.max_rel_error <= tolerance}


async def cmd_steer(
    settings: Settings,
    run_dir: Path,
    model_path: Path | None,
    vector_path: Path | None,
    question: list[int] | None,
    seed: int,
) -> dict[str, Any]:
    model_path = model_path or storage_keys.artifact_path(run_dir, "model")
    vector_path = vector_path or storage_keys.artifact_path(run_dir, "vector")
    lexicon_path = storage_keys.artifact_path(run_dir, "lexicon")
    prompts_path = storage_keys.artifact_path(run_dir, "eval_prompts")
    require(model_path, vector_path, lexicon_path, *([] if question else [prompts_path]))

    model = await artifacts.load_model(model_path)
    vector = await artifacts.load_vector(vector_path)
    evaluation.check_vector(model, vector)
    lexicon = corpus.BehaviorLexicon.from_dict(json.loads(await artifacts.load_text(lexicon_path)))
    if question:
        prompt = [BOS, *question, SPACE]
    else:
        prompt = corpus.loads_sequences(await artifacts.load_text(prompts_path))[0]

    lam = settings.steering.multiplier
    hook = None if lam == 0 else vector.hook(lam)
    gen = settings.generation
    continuation = toymodel.generate(model, prompt, gen.max_new, gen.temperature, hook, seed=seed)
    fluency, _ = evaluation.continuation_stats([continuation], settings.sweep.fluency_n)
    return {
        "lambda": lam,
        "prompt": corpus.render_tokens(prompt, settings.corpus),
        "generation": corpus.render_tokens(continuation, settings.corpus),
        "tokens": " ".join(str(t) for t in continuation),
        "behavior_score": evaluation.behavior_score(model, [prompt], hook, lexicon),
        "fluency": fluency,
    }


async def cmd_sweep(settings: Settings, run_dir: Path, force: bool) -> dict[str, Any]:
    summary = await cmd_stage("sweep", settings, run_dir, force)
    frame = json.loads(await artifacts.load_text(storage_keys.artifact_path(run_dir, "sweep_json")))
    for row in frame["rows"]:
        score = row["behavior_score"]
        summary[f"lambda {row['lambda']:g}"] = (
            f"score={'-' if score is None else f'{score:.4f}'} "
            f"fluency={row['fluency']:.4f} length={row['mean_length']:.2f}"
        )
    return summary


async def cmd_prompt_ablation(settings: Settings, run_dir: Path) -> dict[str, Any]:
    paths = [storage_keys.artifact_path(run_dir, k) for k in ("model", "lexicon", "eval_prompts")]
    require(*paths)
    model = await artifacts.load_model(paths[0])
    lexicon = corpus.BehaviorLexicon.from_dict(json.loads(await artifacts.load_text(paths[1])))
    prompts = corpus.loads_sequences(await artifacts.load_text(paths[2]))
    async with artifacts.run_lock(run_dir):
        scores = await asyncio.to_thread(
            evaluation.prompt_position_ablation, model, corpus.safety_prompt(settings.corpus), prompts, lexicon
        )
        frame = evaluation.rows_frame([evaluation.PositionRow(k, v) for k, v in scores.items()])
        await artifacts.write_artifact(
            storage_keys.artifact_path(run_dir, "ablation_csv"),
            artifacts.encode_frame(frame),
            "ablation_csv",
            params={"corpus": settings.fingerprint("corpus")},
        )
    return dict(scores)


async def cmd_length_sweep(settings: Settings, run_dir: Path) -> dict[str, Any]:
    paths = [storage_keys.artifact_path(run_dir, k) for k in ("model", "length_pair", "length_probes")]
    require(*paths)
    model = await artifacts.load_model(paths[0])
    pair = corpus.loads_corpus(await artifacts.load_text(paths[1])).items[0]
    probes = corpus.loads_sequences(await artifacts.load_text(paths[2]))
    s = settings
    async with artifacts.run_lock(run_dir):
        report = await asyncio.to_thread(
            evaluation.length_steering_eval, model, pair, s.sweep.length_lambdas, probes, s.generation,
            s.steering.layer, s.sweep.top_k, s.sweep.fluency_n, s.sweep.max_workers, s.root_seed,
        )
        await artifacts.write_artifact(
            storage_keys.artifact_path(run_dir, "length_csv"),
            artifacts.encode_frame(report.to_frame()),
            "length_csv",
            params={"sweep": s.fingerprint("sweep")},
        )
    return {f"lambda {row.lam:g}": f"length={row.mean_length:.2f} fluency={row.fluency:.4f}" for row in report.rows}


async def cmd_pipeline(settings: Settings, run_dir: Path, force: bool) -> dict[str, Any]:
    result = await Pipeline(settings, run_dir, force=force).run(STAGES)
    summary: dict[str, Any] = {"run_dir": str(run_dir)}
    for outcome in result.outcomes:
        summary[outcome.stage] = "skipped" if outcome.skipped else "ran"
    return summary


async def dispatch(args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    """Run one command; failures come out classified, logged and tagged with the command."""
    async with ErrorContext(args.command, logger=logger, output_dir=str(args.output_dir or settings.output_root)):
        return await _run_command(args, settings)


async def _run_command(args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    run_dir = run_dir_for(args, settings)
    command = args.command
    force = getattr(args, "force", False)
    if command in ("gen-corpus", "train-toy", "dump-activations", "train-sae"):
        return await cmd_stage(command, settings, run_dir, force)
    if command == "build-vector":
        return await cmd_build_vector(settings, run_dir, force)
    if command == "grad-check":
        return await cmd_grad_check(settings, run_dir, args.rows, args.tolerance)
    if command == "steer":
        return await cmd_steer(settings, run_dir, args.model, args.vector, args.question, args.seed)
    if command == "sweep":
        return await cmd_sweep(settings, run_dir, force)
    if command == "prompt-ablation":
        return await cmd_prompt_ablation(settings, run_dir)
    if command == "length-sweep":
        return await cmd_length_sweep(settings, run_dir)
    return await cmd_pipeline(settings, run_dir, force)


# =============================================================================
# Entry point
# =============================================================================


def main(argv: Sequence[str] | None = None) -> int:
    """Parse, run one command, print its summary and return the exit code."""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, [*args.overrides, *flag_overrides(args)])
    except pydantic.ValidationError as e:
        print(f"Invalid configuration:\n{e}", file=sys.stderr)
        return 1
    except AtomSteeringError as e:
        print(format_user_message(e), file=sys.stderr)
        return exit_code_for(e)

    configure_logging(args.log_level or settings.log_level, json_output=settings.log_format == "json")
    torch.use_deterministic_algorithms(True)
    try:
        summary = asyncio.run(dispatch(args, settings))
    except Exception as e:
        error = classify_error(e)
        logger.debug("command_failed", command=args.command, **error.to_log_dict())
        print(format_user_message(error), file=sys.stderr)
        return exit_code_for(error)

    _emit(summary)
    if args.command == "grad-check" and not summary["passed"]:
        return 2
    return 0
