"""
End-to-end run orchestration.

Stages run in order gen-corpus, train-toy, dump-activations, train-sae,
build-vector, sweep. Each stage hashes its parameters together with the
content hashes of the artifacts it consumes; when every output of a stage
verifies against its manifest and carries the same inputs hash, the stage
is skipped. Any failure is re-raised as StageFailedError naming the stage.
"""

from __future__ import annotations

import asyncio
import json
from collections.abc import Awaitable, Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import structlog
import torch

from atom_steering.config import Settings, derive_seed
from atom_steering.core import artifacts, corpus, evaluation, sae, steering, storage_keys, toymodel
from atom_steering.errors import AtomSteeringError, StageFailedError
from atom_steering.monitoring import trace_stage

logger = structlog.get_logger()

STAGES = ("gen-corpus", "train-toy", "dump-activations", "train-sae", "build-vector", "sweep")

CORPUS_OUTPUTS = ("corpus", "lexicon", "sequences", "eval_prompts", "length_pair", "length_probes")
SWEEP_OUTPUTS = (
    "sweep_csv", "sweep_json", "methods_csv", "length_csv", "ablation_csv", "shots_csv", "data_scale_csv", "layers_csv",
)
SCALE_METHODS = ("caa", "sta")

# Artifacts each stage consumes.
STAGE_INPUTS: dict[str, tuple[str, ...]] = {
    "gen-corpus": (),
    "train-toy": ("sequences",),
    "dump-activations": ("model", "sequences"),
    "train-sae": ("activations",),
    "build-vector": ("model", "corpus", "sae"),
    "sweep": ("model", "vector", "sae", "corpus", "lexicon", "eval_prompts", "length_pair", "length_probes"),
}


@dataclass
class StageOutcome:
    stage: str
    skipped: bool
    inputs_hash: str
    outputs: list[str] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


@dataclass
class PipelineResult:
    run_dir: Path
    outcomes: list[StageOutcome] = field(default_factory=list)

    @property
    def skipped(self) -> list[str]:
        return [o.stage for o in self.outcomes if o.skipped]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_dir": str(self.run_dir),
            "stages": [
                {"stage": o.stage, "skipped": o.skipped, "outputs": o.outputs, **o.summary}
                for o in self.outcomes
            ],
        }


# =============================================================================
# Helpers
# =============================================================================


async def content_hash(path: Path) -> str:
    """Content hash recorded in an artifact's manifest, after verifying it."""
    manifest, _ = await artifacts.verify(path)
    return manifest.content_hash


async def _all_fresh(paths: list[Path], inputs_hash: str) -> bool:
    for path in paths:
        if not await artifacts.is_fresh(path, inputs_hash):
            return False
    return True


def stage_seed(settings: Settings, label: str) -> int:
    return derive_seed(settings.root_seed, label) % (2**31)


def within(values: list[int], low: int, high: int, name: str) -> list[int]:
    """Values inside [low, high] in request order; the rest are logged and dropped."""
    kept = [v for v in values if low <= v <= high]
    dropped = [v for v in values if not low <= v <= high]
    if dropped:
        logger.warning("sweep_values_dropped", field=name, dropped=dropped, low=low, high=high)
    return kept


class Pipeline:
    """Stages over one run directory; each stage may also run on its own."""

    def __init__(self, settings: Settings, run_dir: Path, force: bool = False):
        self.settings = settings
        self.run_dir = run_dir
        self.force = force

    def path(self, kind: str) -> Path:
        return storage_keys.artifact_path(self.run_dir, kind)

    async def _run_stage(
        self,
        stage: str,
        params: dict[str, Any],
        output_kinds: tuple[str, ...],
        body: Callable[[str], Awaitable[dict[str, Any]]],
    ) -> StageOutcome:
        upstream = {kind: await content_hash(self.path(kind)) for kind in STAGE_INPUTS[stage]}
        digest = storage_keys.inputs_hash(params, upstream)
        outputs = [self.path(kind) for kind in output_kinds]
        names = [p.name for p in outputs]
        if not self.force and await _all_fresh(outputs, digest):
            logger.info("stage_skipped", stage=stage, inputs_hash=digest[:12])
            return StageOutcome(stage, True, digest, names)
        with trace_stage(stage, run_dir=str(self.run_dir)) as result:
            summary = await body(digest)
            result.update(summary)
        return StageOutcome(stage, False, digest, names, summary)

    async def _write(self, kind: str, data: bytes | str, digest: str, params: dict[str, Any]) -> None:
        await artifacts.write_artifact(self.path(kind), data, kind, params=params, inputs_hash=digest)

    # -------------------------------------------------------------------------
    # Stages
    # -------------------------------------------------------------------------

    async def gen_corpus(self) -> StageOutcome:
        seed = stage_seed(self.settings, "corpus")
        params = {"corpus": self.settings.fingerprint("corpus"), "seed": seed}

        async def body(digest: str) -> dict[str, Any]:
            data = await asyncio.to_thread(corpus.synthesize, self.settings.corpus, seed)
            await self._write("corpus", corpus.dumps_corpus(data.corpus), digest, params)
            await self._write("lexicon", artifacts.encode_json(data.lexicon.to_dict()), digest, params)
            await self._write("sequences", corpus.dumps_sequences(data.lm_sequences), digest, params)
            await self._write("eval_prompts", corpus.dumps_sequences(data.eval_prompts), digest, params)
            length_pair = corpus.dumps_corpus(corpus.BehaviorCorpus([data.length_pair]))
            await self._write("length_pair", length_pair, digest, params)
            await self._write("length_probes", corpus.dumps_sequences(data.length_probes), digest, params)
            return {"n_items": len(data.corpus), "n_sequences": len(data.lm_sequences)}

        return await self._run_stage("gen-corpus", params, CORPUS_OUTPUTS, body)

    async def train_toy(self) -> StageOutcome:
        model_config = self.settings.model.model_copy(update={"seed": stage_seed(self.settings, "model")})
        params = {"model": model_config.model_dump(mode="json"), "train": self.settings.fingerprint("train")}

        async def body(digest: str) -> dict[str, Any]:
            sequences = corpus.loads_sequences(await artifacts.load_text(self.path("sequences")))
            model = toymodel.init_model(model_config)
            train = self.settings.train
            report = await asyncio.to_thread(
                toymodel.train_toy, model, sequences, train.steps, train.lr, train.weight_decay, train.log_every
            )
            await artifacts.save_model(self.path("model"), model, params=params, inputs_hash=digest)
            return {"initial_loss": report.initial_loss, "final_loss": report.final_loss}

        return await self._run_stage("train-toy", params, ("model",), body)

    async def dump_activations(self) -> StageOutcome:
        layer = self.settings.steering.layer
        params = {"layer": layer}

        async def body(digest: str) -> dict[str, Any]:
            model = await artifacts.load_model(self.path("model"))
            sequences = corpus.loads_sequences(await artifacts.load_text(self.path("sequences")))
            acts = await asyncio.to_thread(toymodel.residual_activations, model, sequences, layer)
            await artifacts.save_activations(self.path("activations"), acts, params=params, inputs_hash=digest)
            return {"n_rows": int(acts.shape[0]), "d_model": int(acts.shape[1])}

        return await self._run_stage("dump-activations", params, ("activations",), body)

    async def train_sae(self) -> StageOutcome:
        sae_config = self.settings.sae.model_copy(update={"seed": stage_seed(self.settings, "sae")})
        params = {"sae": sae_config.model_dump(mode="json")}

        async def body(digest: str) -> dict[str, Any]:
            acts = await artifacts.load_activations(self.path("activations"))
            trained, report = await asyncio.to_thread(sae.train_sae, acts, sae_config)
            await artifacts.save_sae(self.path("sae"), trained, params=params, inputs_hash=digest)
            return {
                "final_l0": report.final_l0,
                "initial_recon": report.initial_recon,
                "final_recon": report.final_recon,
                "max_norm_error": report.max_norm_error,
            }

        return await self._run_stage("train-sae", params, ("sae",), body)

    async def build_vector(self) -> StageOutcome:
        cfg = self.settings.steering
        params = {"steering": self.settings.fingerprint("steering")}

        async def body(digest: str) -> dict[str, Any]:
            model = await artifacts.load_model(self.path("model"))
            behavior = corpus.loads_corpus(await artifacts.load_text(self.path("corpus")))
            params_sae = await artifacts.load_sae(self.path("sae"))
            vector = await asyncio.to_thread(
                steering.build_vector,
                cfg.method,
                model,
                cfg.layer,
                corpus=behavior,
                sae=params_sae,
                prompt=corpus.safety_prompt(self.settings.corpus),
                top_fraction=cfg.top_fraction,
                include_decoder_bias=cfg.include_decoder_bias,
                match=cfg.match_magnitude,
            )
            caa = await asyncio.to_thread(steering.caa_vector, model, behavior, cfg.layer)
            await artifacts.save_vector(self.path("vector"), vector, params=params, inputs_hash=digest)
            await artifacts.save_vector(self.path("caa_vector"), caa, params=params, inputs_hash=digest)
            return {
                "method": vector.method.value,
                "norm": vector.norm,
                "n_atoms": vector.n_atoms,
                "alpha": vector.alpha,
                "beta": vector.beta,
            }

        return await self._run_stage("build-vector", params, ("vector", "caa_vector"), body)

    async def sweep(self) -> StageOutcome:
        s = self.settings
        params = {
            "sweep": s.fingerprint("sweep"),
            "generation": s.fingerprint("generation"),
            "steering": s.fingerprint("steering"),
            "seed": stage_seed(s, "sweep"),
        }

        async def body(digest: str) -> dict[str, Any]:
            model = await artifacts.load_model(self.path("model"))
            vector = await artifacts.load_vector(self.path("vector"))
            params_sae = await artifacts.load_sae(self.path("sae"))
            behavior = corpus.loads_corpus(await artifacts.load_text(self.path("corpus")))
            lexicon = corpus.BehaviorLexicon.from_dict(json.loads(await artifacts.load_text(self.path("lexicon"))))
            prompts = corpus.loads_sequences(await artifacts.load_text(self.path("eval_prompts")))
            pair = corpus.loads_corpus(await artifacts.load_text(self.path("length_pair"))).items[0]
            probes = corpus.loads_sequences(await artifacts.load_text(self.path("length_probes")))
            prompt = corpus.safety_prompt(s.corpus)
            seed = stage_seed(s, "sweep")

            report = await asyncio.to_thread(
                evaluation.boundary_sweep, model, vector, s.sweep.lambdas, prompts, lexicon,
                s.generation, s.sweep.top_k, s.sweep.fluency_n, s.sweep.max_workers, seed,
            )
            methods = await asyncio.to_thread(
                evaluation.compare_methods, model, params_sae, behavior, s.steering.layer, prompts, lexicon,
                prompt, s.steering.top_fraction, s.steering.multiplier, s.steering.include_decoder_bias,
            )
            length = await asyncio.to_thread(
                evaluation.length_steering_eval, model, pair, s.sweep.length_lambdas, probes,
                s.generation, s.steering.layer, s.sweep.top_k, s.sweep.fluency_n, s.sweep.max_workers, seed,
            )
            ablation = await asyncio.to_thread(evaluation.prompt_position_ablation, model, prompt, prompts, lexicon)
            shots = within(s.sweep.shots, 0, min(evaluation.MAX_SHOTS, len(behavior)), "sweep.shots")
            shot_rows = []
            for positive in (True, False):
                shot_rows += await asyncio.to_thread(
                    evaluation.demonstration_sweep, model, behavior, shots, prompts, lexicon, positive, s.sweep.top_k,
                )
            sizes = within(s.sweep.data_sizes, 1, len(behavior), "sweep.data_sizes")
            scale_rows = []
            for method in SCALE_METHODS:
                scale_rows += await asyncio.to_thread(
                    evaluation.data_scale_sweep, model, behavior, sizes, s.steering.layer, method,
                    s.steering.multiplier, prompts, lexicon, params_sae, s.steering.top_fraction,
                    s.steering.include_decoder_bias,
                )
            n_layers = model.config.n_layers
            layers = within(s.sweep.layers or list(range(n_layers)), 0, n_layers - 1, "sweep.layers")
            layer_rows = await asyncio.to_thread(
                evaluation.layer_sweep, model, behavior, layers, s.steering.multiplier, prompts, lexicon,
                {s.steering.layer: params_sae}, s.steering.top_fraction, s.steering.include_decoder_bias,
            )

            await self._write("sweep_csv", artifacts.encode_frame(report.to_frame()), digest, params)
            await self._write("sweep_json", artifacts.encode_json(report.to_dict()), digest, params)
            await self._write("methods_csv", artifacts.encode_frame(evaluation.rows_frame(methods)), digest, params)
            await self._write("length_csv", artifacts.encode_frame(length.to_frame()), digest, params)
            ablation_frame = evaluation.rows_frame([evaluation.PositionRow(k, v) for k, v in ablation.items()])
            await self._write("ablation_csv", artifacts.encode_frame(ablation_frame), digest, params)
            await self._write("shots_csv", artifacts.encode_frame(evaluation.rows_frame(shot_rows)), digest, params)
            await self._write(
                "data_scale_csv", artifacts.encode_frame(evaluation.rows_frame(scale_rows)), digest, params
            )
            await self._write("layers_csv", artifacts.encode_frame(evaluation.rows_frame(layer_rows)), digest, params)
            return {
                "n_lambdas": len(report.rows),
                "n_methods": len(methods),
                "n_shots": len(shots),
                "n_sizes": len(sizes),
                "n_layers": len(layers),
            }

        return await self._run_stage("sweep", params, SWEEP_OUTPUTS, body)

    # -------------------------------------------------------------------------
    # Orchestration
    # -------------------------------------------------------------------------

    def _stage_fns(self) -> dict[str, Callable[[], Awaitable[StageOutcome]]]:
        return {
            "gen-corpus": self.gen_corpus,
            "train-toy": self.train_toy,
            "dump-activations": self.dump_activations,
            "train-sae": self.train_sae,
            "build-vector": self.build_vector,
            "sweep": self.sweep,
        }

    async def run_stage(self, stage: str) -> StageOutcome:
        """Run one stage, wrapping any failure in StageFailedError."""
        try:
            return await self._stage_fns()[stage]()
        except StageFailedError:
            raise
        except (AtomSteeringError, OSError, RuntimeError, ValueError) as e:
            raise StageFailedError(stage, e) from e

    async def run(self, stages: tuple[str, ...] = STAGES) -> PipelineResult:
        """Run stages in order under the run-directory lock."""
        torch.use_deterministic_algorithms(True)
        result = PipelineResult(self.run_dir)
        async with artifacts.run_lock(self.run_dir):
            for stage in stages:
                result.outcomes.append(await self.run_stage(stage))
        logger.info("pipeline_completed", run_dir=str(self.run_dir), skipped=result.skipped)
        return result
