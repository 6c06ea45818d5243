"""Tests for the evaluation harness."""

from __future__ import annotations

import math

import pytest
import torch

from atom_steering.config import BOS, SPACE, GenerationConfig
from atom_steering.core import toymodel
from atom_steering.core.corpus import BehaviorItem, BehaviorLexicon
from atom_steering.core.evaluation import (
    POSITIONS,
    REPORT_COLUMNS,
    behavior_score,
    boundary_sweep,
    check_vector,
    compare_methods,
    continuation_stats,
    data_scale_sweep,
    demonstration_sweep,
    fluency_ngram,
    layer_sweep,
    length_steering_eval,
    lexicon_score,
    place_prompt,
    prompt_position_ablation,
    question_attention,
    rows_frame,
    topk_from_logits,
)
from atom_steering.core.numerics import DTYPE, as_tensor
from atom_steering.core.steering import SteeringVector, VectorMethod, caa_vector
from atom_steering.errors import (
    ConfigurationError,
    DegenerateInputError,
    InputError,
    ParameterError,
)

GEN = GenerationConfig(max_new=4, temperature=0.8, n_seeds=2)


def _zero_vector(dim: int = 16, layer: int = 1) -> SteeringVector:
    return SteeringVector(values=torch.zeros(dim, dtype=DTYPE), method=VectorMethod.CAA, layer=layer)


class TestLexiconScore:
    """Tests for the renormalized lexicon mass."""

    def test_uniform_distribution(self):
        """Should give 0.5 for a uniform distribution over equal lexicons."""
        lexicon = BehaviorLexicon(frozenset(range(24, 32)), frozenset(range(32, 40)))
        assert lexicon_score(torch.full((64,), 1 / 64, dtype=DTYPE), lexicon) == pytest.approx(0.5)

    def test_all_positive_mass(self):
        """Should give 1.0 when only positive tokens have mass."""
        lexicon = BehaviorLexicon(frozenset({24}), frozenset({32}))
        probs = torch.zeros(64, dtype=DTYPE)
        probs[24] = 1.0
        assert lexicon_score(probs, lexicon) == 1.0

    def test_no_lexicon_mass(self):
        """Should fall back to 0.5 when neither lexicon has mass."""
        lexicon = BehaviorLexicon(frozenset({24}), frozenset({32}))
        probs = torch.zeros(64, dtype=DTYPE)
        probs[5] = 1.0
        assert lexicon_score(probs, lexicon) == 0.5


class TestBehaviorScore:
    """Tests for scoring a model on evaluation prompts."""

    def test_untrained_model_is_near_half(self, data, model_config):
        """Should stay near 0.5 for freshly initialized models."""
        scores = []
        for seed in range(20):
            model = toymodel.init_model(model_config.model_copy(update={"seed": seed}))
            scores.append(behavior_score(model, data.eval_prompts, None, data.lexicon))

        assert abs(sum(scores) / len(scores) - 0.5) < 0.05

    def test_in_unit_interval(self, model, data):
        """Should stay in [0, 1] under strong steering."""
        vector = caa_vector(model, data.corpus, 1)
        for lam in (-50.0, 0.0, 50.0):
            score = behavior_score(model, data.eval_prompts, vector.hook(lam), data.lexicon)
            assert 0.0 <= score <= 1.0

    def test_zero_hook_matches_unhooked(self, model, data):
        """Should give the same score for a zero vector and no hook."""
        hooked = behavior_score(model, data.eval_prompts, _zero_vector().hook(3.0), data.lexicon)
        assert hooked == behavior_score(model, data.eval_prompts, None, data.lexicon)

    def test_no_prompts(self, model, data):
        """Should raise InputError for no prompts."""
        with pytest.raises(InputError):
            behavior_score(model, [], None, data.lexicon)

    def test_lexicon_outside_vocab(self, model, data):
        """Should raise ConfigurationError when the lexicon does not fit."""
        lexicon = BehaviorLexicon(frozenset({24}), frozenset({99}))
        with pytest.raises(ConfigurationError):
            behavior_score(model, data.eval_prompts, None, lexicon)


class TestFluency:
    """Tests for distinct-n fluency."""

    def test_repetition(self):
        """Should give 1/3 for four identical tokens."""
        assert fluency_ngram([7, 7, 7, 7], 2) == pytest.approx(1 / 3)

    def test_all_distinct(self):
        """Should give 1.0 when every n-gram differs."""
        assert fluency_ngram([4, 5, 6, 7], 2) == 1.0

    def test_length_n(self):
        """Should give 1.0 for a sequence of exactly n tokens."""
        assert fluency_ngram([9, 9, 9], 3) == 1.0

    def test_relabeling_invariance(self):
        """Should not depend on token identities."""
        seq = [4, 5, 4, 5, 6, 4]
        relabel = {4: 60, 5: 12, 6: 33}
        assert fluency_ngram(seq, 2) == fluency_ngram([relabel[t] for t in seq], 2)

    def test_too_short(self):
        """Should raise InputError for fewer than n tokens."""
        with pytest.raises(InputError):
            fluency_ngram([4], 2)

    def test_bad_n(self):
        """Should raise ParameterError for n below 1."""
        with pytest.raises(ParameterError):
            fluency_ngram([4, 5], 0)

    def test_continuation_stats_skips_short(self):
        """Should leave short continuations out of fluency but not length."""
        fluency, length = continuation_stats([[7, 7, 7, 7], [5]], 2)

        assert fluency == pytest.approx(1 / 3)
        assert length == 2.5

    def test_continuation_stats_nothing_scorable(self):
        """Should report fluency 1.0 when nothing is long enough."""
        assert continuation_stats([[], [5]], 2) == (1.0, 0.5)


class TestTopK:
    """Tests for top-k distributions."""

    def test_hand_example(self):
        """Should list the two most likely tokens with their probabilities."""
        top = topk_from_logits(as_tensor([2.0, 1.0, 0.0]), 2)

        assert [t for t, _ in top] == [0, 1]
        assert top[0][1] == pytest.approx(0.6652, abs=1e-4)
        assert top[1][1] == pytest.approx(0.2447, abs=1e-4)

    def test_full_vocabulary_sums_to_one(self):
        """Should cover all mass with k equal to the vocabulary."""
        top = topk_from_logits(torch.randn(10, generator=torch.Generator().manual_seed(0), dtype=DTYPE), 10)
        assert math.fsum(p for _, p in top) == pytest.approx(1.0, abs=1e-12)

    def test_ties_prefer_lower_id(self):
        """Should order tied tokens by id."""
        assert [t for t, _ in topk_from_logits(torch.zeros(4, dtype=DTYPE), 3)] == [0, 1, 2]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        """Should raise ParameterError for k outside [1, V]."""
        with pytest.raises(ParameterError):
            topk_from_logits(torch.zeros(3, dtype=DTYPE), k)


class TestBoundarySweep:
    """Tests for multiplier sweeps."""

    @pytest.fixture
    def vector(self, model, data):
        return caa_vector(model, data.corpus, 1)

    def test_report_shape(self, model, data, vector):
        """Should give one aggregate per multiplier and one cell per seed."""
        report = boundary_sweep(model, vector, [-1.0, 0.0, 1.0], data.eval_prompts, data.lexicon, GEN, top_k=3)

        assert [row.lam for row in report.rows] == [-1.0, 0.0, 1.0]
        assert len(report.cells) == 3 * GEN.n_seeds
        assert all(len(row.top_tokens) == 3 for row in report.rows)
        assert list(report.to_frame().columns) == REPORT_COLUMNS
        assert "lambda" in report.to_dict()["rows"][0]

    def test_zero_row_is_vanilla(self, model, data, vector):
        """Should match the unsteered model at multiplier 0."""
        report = boundary_sweep(model, vector, [0.0], data.eval_prompts, data.lexicon, GEN)
        vanilla = boundary_sweep(model, _zero_vector(), [1.0], data.eval_prompts, data.lexicon, GEN)

        row, plain = report.row(0.0), vanilla.row(1.0)
        assert row.behavior_score == behavior_score(model, data.eval_prompts, None, data.lexicon)
        assert row.behavior_score == plain.behavior_score
        assert row.fluency == plain.fluency
        assert row.mean_length == plain.mean_length
        assert row.top_tokens == plain.top_tokens

    def test_cells_carry_row_score(self, model, data, vector):
        """Should copy the behavior score onto each cell."""
        report = boundary_sweep(model, vector, [2.0], data.eval_prompts, data.lexicon, GEN)
        assert {c.behavior_score for c in report.cells_for(2.0)} == {report.row(2.0).behavior_score}

    def test_aggregate_bounds(self, model, data, vector):
        """Should bracket the mean between per-seed extremes."""
        row = boundary_sweep(model, vector, [1.0], data.eval_prompts, data.lexicon, GEN).row(1.0)
        assert row.fluency_min <= row.fluency <= row.fluency_max
        assert row.length_min <= row.mean_length <= row.length_max

    def test_worker_count_does_not_change_results(self, model, data, vector):
        """Should produce the same report serially and in parallel."""
        serial = boundary_sweep(model, vector, [-1.0, 1.0], data.eval_prompts, data.lexicon, GEN, max_workers=1)
        parallel = boundary_sweep(model, vector, [-1.0, 1.0], data.eval_prompts, data.lexicon, GEN, max_workers=2)
        assert serial.to_frame().equals(parallel.to_frame())

    def test_dimension_mismatch(self, model, data):
        """Should raise ConfigurationError for a vector of the wrong width."""
        with pytest.raises(ConfigurationError):
            boundary_sweep(model, _zero_vector(dim=8), [1.0], data.eval_prompts, data.lexicon, GEN)

    def test_layer_out_of_range(self, model):
        """Should raise ConfigurationError for a vector on a missing layer."""
        with pytest.raises(ConfigurationError):
            check_vector(model, _zero_vector(layer=5))

    def test_empty_lambdas(self, model, data, vector):
        """Should raise InputError with no multipliers."""
        with pytest.raises(InputError):
            boundary_sweep(model, vector, [], data.eval_prompts, data.lexicon, GEN)


class TestLengthSteering:
    """Tests for reasoning-length steering."""

    def test_report(self, model, data):
        """Should report lengths without a behavior score."""
        report = length_steering_eval(model, data.length_pair, [0.0, 2.0], data.length_probes, GEN, layer=1)

        assert [row.lam for row in report.rows] == [0.0, 2.0]
        assert all(row.behavior_score is None for row in report.rows)
        assert all(0 <= row.mean_length <= GEN.max_new for row in report.rows)

    def test_identical_pair(self, model, data):
        """Should raise DegenerateInputError when long and short match."""
        pair = BehaviorItem((44,), (52, 53), (52, 53))
        with pytest.raises(DegenerateInputError):
            length_steering_eval(model, pair, [1.0], data.length_probes, GEN, layer=1)


class TestPromptPlacement:
    """Tests for prompt positions."""

    def test_positions(self):
        """Should place the prompt before, after or behind the question."""
        prompt = [BOS, 5, 6, SPACE]

        assert place_prompt(prompt, [40], "input_prefix") == [BOS, 40, 5, 6, SPACE]
        assert place_prompt(prompt, [40], "input_suffix") == [BOS, 5, 6, 40, SPACE]
        assert place_prompt(prompt, [40], "output_prefix") == [BOS, 5, 6, SPACE, 40]

    def test_unknown_position(self):
        """Should raise ParameterError for an unknown position."""
        with pytest.raises(ParameterError):
            place_prompt([BOS, 5, SPACE], [40], "middle")

    def test_malformed_eval_prompt(self):
        """Should raise InputError when the prompt is not BOS q SPACE."""
        with pytest.raises(InputError):
            place_prompt([5, 6], [40], "input_prefix")

    def test_empty_prompt_ablation_is_vanilla(self, model, data):
        """Should score every position like the vanilla model for an empty prompt."""
        vanilla = behavior_score(model, data.eval_prompts, None, data.lexicon)
        scores = prompt_position_ablation(model, [], data.eval_prompts, data.lexicon)

        assert list(scores) == list(POSITIONS)
        assert all(score == vanilla for score in scores.values())


class TestDemonstrations:
    """Tests for few-shot sweeps."""

    def test_zero_shots_is_vanilla(self, model, data):
        """Should score zero shots like the plain prompts."""
        rows = demonstration_sweep(model, data.corpus, [0, 2], data.eval_prompts, data.lexicon, top_k=3)

        assert [row.shots for row in rows] == [0, 2]
        assert rows[0].behavior_score == behavior_score(model, data.eval_prompts, None, data.lexicon)
        assert rows_frame(rows)["direction"].tolist() == ["positive", "positive"]

    def test_too_many_shots(self, model, data):
        """Should raise ParameterError beyond sixteen shots."""
        with pytest.raises(ParameterError):
            demonstration_sweep(model, data.corpus, [17], data.eval_prompts, data.lexicon)

    def test_corpus_too_small(self, model, data):
        """Should raise InputError when the corpus has fewer items than shots."""
        with pytest.raises(InputError):
            demonstration_sweep(model, data.corpus.head(1), [2], data.eval_prompts, data.lexicon)


class TestComparisons:
    """Tests for method, data-size and layer comparisons."""

    def test_method_rows(self, model, small_sae, data):
        """Should score vanilla, prompting and every method in a fixed order."""
        rows = compare_methods(model, small_sae, data.corpus, 1, data.eval_prompts, data.lexicon, data.prompt)

        assert [row.method for row in rows] == [
            "vanilla", "prompt", "caa", "axbench", "sta", "sta_wo_amplitude",
            "sta_wo_frequency", "prompt_caa", "prompt_sta", "prompt_mean",
        ]
        assert rows[0].norm == 0.0
        assert all(0.0 <= row.behavior_score <= 1.0 for row in rows)
        assert all(len(row.attention) == 2 for row in rows)
        assert "attn_layer1" in rows_frame(rows).columns

    def test_question_attention_in_unit_interval(self, model, data):
        """Should give per-layer attention mass in [0, 1]."""
        for value in question_attention(model, data.eval_prompts, None):
            assert 0.0 <= value <= 1.0 + 1e-12

    def test_data_scale(self, model, data):
        """Should score one vector per corpus size."""
        rows = data_scale_sweep(model, data.corpus, [1, 4], 1, "caa", 1.0, data.eval_prompts, data.lexicon)

        assert [(row.value, row.method) for row in rows] == [(1, "caa"), (4, "caa")]
        assert rows[1].norm == pytest.approx(caa_vector(model, data.corpus.head(4), 1).norm)

    def test_data_scale_size_out_of_range(self, model, data):
        """Should raise InputError for a size of zero."""
        with pytest.raises(InputError):
            data_scale_sweep(model, data.corpus, [0], 1, "caa", 1.0, data.eval_prompts, data.lexicon)

    def test_layer_sweep(self, model, small_sae, data):
        """Should add STA rows only where an SAE is given."""
        rows = layer_sweep(model, data.corpus, [0, 1], 1.0, data.eval_prompts, data.lexicon, saes={1: small_sae})
        assert [(row.value, row.method) for row in rows] == [(0, "caa"), (1, "caa"), (1, "sta")]
