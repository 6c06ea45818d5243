"""Tests for steering vector construction."""

from __future__ import annotations

import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atom_steering.core.corpus import BehaviorCorpus, BehaviorItem
from atom_steering.core.numerics import DTYPE, as_tensor, cosine_similarity
from atom_steering.core.sae import SaeParams, random_params
from atom_steering.core.steering import (
    AtomStats,
    SelectionThresholds,
    SteeringVector,
    VectorMethod,
    axbench_vector,
    build_sta,
    build_vector,
    caa_from_states,
    caa_vector,
    collect_atom_stats,
    decoded_difference,
    match_magnitude,
    pair_vector,
    prompt_mean_vector,
    prompt_to_vector,
    select_target_atoms,
    selection_mask,
    sta_vector,
    stats_from_means,
    thresholds_from_fraction,
)
from atom_steering.errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    InputError,
    ParameterError,
)

MODES = ("full", "wo_amplitude", "wo_frequency")


def _stats(delta_a, delta_f) -> AtomStats:
    delta_a, delta_f = as_tensor(delta_a), as_tensor(delta_f)
    return AtomStats(
        delta_a=delta_a,
        f_pos=delta_f.clamp(min=0),
        f_neg=(-delta_f).clamp(min=0),
        delta_f=delta_f,
        n_examples=1,
        layer=0,
    )


def _hand_sae() -> SaeParams:
    return SaeParams(
        w_enc=torch.zeros(2, 3, dtype=DTYPE),
        b_enc=torch.zeros(3, dtype=DTYPE),
        w_dec=as_tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        b_dec=as_tensor([0.25, -0.5]),
        theta=torch.full((3,), 0.1, dtype=DTYPE),
    )


def _random_means(seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Sparse non-negative per-item mean activations for random M <= 64, N <= 16."""
    g = torch.Generator().manual_seed(seed)
    m = int(torch.randint(1, 65, (1,), generator=g))
    n = int(torch.randint(1, 17, (1,), generator=g))

    def draw() -> torch.Tensor:
        values = torch.rand(n, m, generator=g, dtype=DTYPE)
        return torch.where(torch.rand(n, m, generator=g) < 0.5, values, torch.zeros_like(values))

    return draw(), draw()


def _brute_force_selection(stats: AtomStats, alpha: float, beta: float, mode: str) -> list[float]:
    out = []
    for j in range(stats.n_atoms):
        da, df = float(stats.delta_a[j]), float(stats.delta_f[j])
        if mode == "full":
            keep = da >= alpha and df >= beta
        elif mode == "wo_amplitude":
            keep = df >= beta
        else:
            keep = da >= alpha
        out.append(da if keep else 0.0)
    return out


class TestAtomStats:
    """Tests for amplitude and frequency contrast."""

    def test_hand_example(self):
        """Should compute delta_a, frequencies and delta_f from per-item means."""
        pos = as_tensor([[1, 0, 2], [1, 2, 0]])
        neg = as_tensor([[0, 0, 1], [1, 0, 0]])
        stats = stats_from_means(pos, neg, layer=0)

        assert stats.delta_a.tolist() == [0.5, 1.0, 0.5]
        assert stats.f_pos.tolist() == [1.0, 0.5, 0.5]
        assert stats.f_neg.tolist() == [0.5, 0.0, 0.5]
        assert stats.delta_f.tolist() == [0.5, 0.5, 0.0]

    def test_identical_inputs(self):
        """Should give zero contrast when positive equals negative."""
        means = as_tensor([[0.3, 0.0], [0.0, 1.2]])
        stats = stats_from_means(means, means.clone(), layer=0)

        assert stats.delta_a.tolist() == [0.0, 0.0]
        assert stats.delta_f.tolist() == [0.0, 0.0]

    def test_single_item_frequencies_are_indicators(self):
        """Should give frequencies in {0, 1} for one item."""
        stats = stats_from_means(as_tensor([[0.0, 0.4]]), as_tensor([[0.2, 0.0]]), layer=0)
        assert set(stats.f_pos.tolist()) | set(stats.f_neg.tolist()) <= {0.0, 1.0}

    def test_shape_mismatch(self):
        """Should raise DimensionError for mismatched means."""
        with pytest.raises(DimensionError):
            stats_from_means(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE), layer=0)

    def test_collect_from_model(self, model, small_sae, data):
        """Should keep frequencies in [0, 1] and delta_f equal to their difference."""
        stats = collect_atom_stats(model, small_sae, data.corpus, layer=1)

        assert stats.n_atoms == 32
        assert stats.n_examples == len(data.corpus)
        assert bool(((stats.f_pos >= 0) & (stats.f_pos <= 1)).all())
        assert torch.equal(stats.delta_f, stats.f_pos - stats.f_neg)

    def test_collect_identical_answers(self, model, small_sae):
        """Should give zero contrast when every item answers the same both ways."""
        corpus = BehaviorCorpus([BehaviorItem((5, 6), (24, 25), (24, 25))])
        stats = collect_atom_stats(model, small_sae, corpus, layer=0)

        assert float(stats.delta_a.abs().sum()) == 0.0
        assert float(stats.delta_f.abs().sum()) == 0.0

    def test_collect_width_mismatch(self, model, data):
        """Should raise ConfigurationError when the SAE does not fit the model."""
        with pytest.raises(ConfigurationError):
            collect_atom_stats(model, random_params(8, 32, seed=0), data.corpus, layer=0)

    def test_collect_empty_answer(self, model, small_sae):
        """Should raise InputError for an empty answer."""
        corpus = BehaviorCorpus([BehaviorItem((5,), (), (32,))])
        with pytest.raises(InputError):
            collect_atom_stats(model, small_sae, corpus, layer=0)


class TestThresholds:
    """Tests for top-fraction thresholds."""

    def test_hand_example(self):
        """Should take alpha and beta at the rank of the top fraction."""
        stats = _stats([0.9, 0.1, -0.5, 0.3], [0.6, 0.7, 0.9, 0.2])
        thresholds = thresholds_from_fraction(stats, 0.35)

        assert thresholds.alpha == 0.3
        assert thresholds.beta == 0.7
        assert thresholds.top_fraction == 0.35

    def test_full_fraction_admits_everything(self):
        """Should set thresholds at the minima for fraction 1."""
        stats = _stats([0.9, 0.1, -0.5], [0.6, -0.2, 0.9])
        thresholds = thresholds_from_fraction(stats, 1.0)

        assert thresholds.alpha == -0.5
        assert thresholds.beta == -0.2
        assert bool(selection_mask(stats, thresholds).all())

    def test_single_atom(self):
        """Should use the only values for one atom."""
        thresholds = thresholds_from_fraction(_stats([0.4], [0.5]), 0.35)
        assert (thresholds.alpha, thresholds.beta) == (0.4, 0.5)

    def test_fraction_out_of_range(self):
        """Should raise ParameterError outside (0, 1]."""
        with pytest.raises(ParameterError):
            thresholds_from_fraction(_stats([0.4], [0.5]), 1.5)


class TestSelection:
    """Tests for target-atom selection."""

    @pytest.fixture
    def stats(self):
        return _stats([0.9, 0.1, -0.5], [0.6, 0.7, 0.9])

    def test_both_filters(self, stats):
        """Should drop atoms failing either threshold."""
        out = select_target_atoms(stats, SelectionThresholds(alpha=0.5, beta=0.65))
        assert out.tolist() == [0.0, 0.0, 0.0]

    def test_amplitude_and_frequency_pass(self, stats):
        """Should keep delta_a on atoms passing both thresholds."""
        out = select_target_atoms(stats, SelectionThresholds(alpha=0.5, beta=0.4))
        assert out.tolist() == [0.9, 0.0, 0.0]

    def test_pass_all_returns_delta_a(self, stats):
        """Should return delta_a unchanged with pass-all thresholds."""
        out = select_target_atoms(stats, SelectionThresholds.pass_all())
        assert torch.equal(out, stats.delta_a)
        assert SelectionThresholds.pass_all().admits_all

    def test_unknown_mode(self, stats):
        """Should raise ParameterError for an unknown mode."""
        with pytest.raises(ParameterError):
            select_target_atoms(stats, SelectionThresholds(0.0, 0.0), mode="neither")  # type: ignore[arg-type]

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force(self, seed):
        """Should agree exactly with a per-atom loop in every mode."""
        pos, neg = _random_means(seed)
        stats = stats_from_means(pos, neg, layer=0)
        fraction = [0.1, 0.35, 0.5, 1.0][seed % 4]
        thresholds = thresholds_from_fraction(stats, fraction)
        for mode in MODES:
            expected = _brute_force_selection(stats, thresholds.alpha, thresholds.beta, mode)
            assert select_target_atoms(stats, thresholds, mode).tolist() == expected

    @pytest.mark.parametrize("seed", range(100))
    def test_full_is_intersection_of_ablations(self, seed):
        """Should select exactly the atoms both single-filter modes select."""
        pos, neg = _random_means(1000 + seed)
        stats = stats_from_means(pos, neg, layer=0)
        thresholds = thresholds_from_fraction(stats, 0.35)

        full = selection_mask(stats, thresholds, "full")
        both = selection_mask(stats, thresholds, "wo_amplitude") & selection_mask(stats, thresholds, "wo_frequency")
        assert torch.equal(full, both)

    @given(
        st.integers(0, 999),
        st.floats(-1.0, 1.0),
        st.floats(0.0, 1.0),
        st.floats(-1.0, 1.0),
        st.floats(0.0, 1.0),
    )
    @settings(max_examples=100)
    def test_raising_thresholds_never_adds_atoms(self, seed, alpha, d_alpha, beta, d_beta):
        """Should select a subset when alpha or beta grows, in every mode."""
        pos, neg = _random_means(2000 + seed)
        stats = stats_from_means(pos, neg, layer=0)
        loose = SelectionThresholds(alpha=alpha, beta=beta)
        strict = SelectionThresholds(alpha=alpha + d_alpha, beta=beta + d_beta)
        for mode in MODES:
            inner = selection_mask(stats, strict, mode)
            outer = selection_mask(stats, loose, mode)
            assert not bool((inner & ~outer).any()), mode


class TestStaVector:
    """Tests for decoding target atoms."""

    def test_hand_product(self):
        """Should decode a_target through W_dec."""
        vector = sta_vector(as_tensor([0.5, 1.0, 0.0]), _hand_sae(), include_decoder_bias=False)

        assert vector.values.tolist() == [0.5, 1.0]
        assert vector.n_atoms == 2

    def test_zero_target_with_bias(self):
        """Should reduce to b_dec when no atom is selected and the bias is on."""
        vector = sta_vector(torch.zeros(3, dtype=DTYPE), _hand_sae(), include_decoder_bias=True)
        assert vector.values.tolist() == [0.25, -0.5]

    def test_zero_target_without_bias(self):
        """Should be the zero vector when no atom is selected and the bias is off."""
        vector = sta_vector(torch.zeros(3, dtype=DTYPE), _hand_sae(), include_decoder_bias=False)
        assert vector.values.tolist() == [0.0, 0.0]

    def test_dimension_mismatch(self):
        """Should raise DimensionError when a_target does not match the atom count."""
        with pytest.raises(DimensionError):
            sta_vector(torch.zeros(4, dtype=DTYPE), _hand_sae())

    @pytest.mark.parametrize("seed", range(50))
    def test_pass_all_without_bias_is_decoded_difference(self, seed):
        """Should equal the mean difference of decoded activations."""
        pos, neg = _random_means(2000 + seed)
        m = pos.shape[1]
        sae = random_params(6, max(m, 7), seed=seed)
        pad = sae.d_sae - m
        pos = torch.nn.functional.pad(pos, (0, pad))
        neg = torch.nn.functional.pad(neg, (0, pad))

        stats = stats_from_means(pos, neg, layer=0)
        vector = axbench_vector(stats, sae, include_decoder_bias=False)
        assert torch.allclose(vector.values, decoded_difference(sae, pos, neg), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("include_bias", [True, False])
    def test_axbench_is_sta_with_pass_all(self, include_bias):
        """Should be bitwise equal to STA decoded with pass-all thresholds."""
        pos, neg = _random_means(7)
        sae = random_params(6, pos.shape[1] + 6, seed=1)
        pad = sae.d_sae - pos.shape[1]
        stats = stats_from_means(
            torch.nn.functional.pad(pos, (0, pad)), torch.nn.functional.pad(neg, (0, pad)), layer=0
        )

        sta = sta_vector(select_target_atoms(stats, SelectionThresholds.pass_all()), sae, include_bias)
        baseline = axbench_vector(stats, sae, include_bias)
        assert torch.equal(sta.values, baseline.values)
        assert baseline.method is VectorMethod.SAE_AXBENCH

    def test_build_sta_full_fraction_matches_axbench(self, model, small_sae, data):
        """Should give identical values to AXBENCH at top fraction 1."""
        stats = collect_atom_stats(model, small_sae, data.corpus, layer=1)
        sta = build_sta(model, small_sae, data.corpus, 1, top_fraction=1.0, stats=stats)
        baseline = axbench_vector(stats, small_sae, include_decoder_bias=True)
        assert torch.equal(sta.values, baseline.values)

    def test_build_sta_records_metadata(self, model, small_sae, data):
        """Should record thresholds, fraction, atom count and corpus hash."""
        vector = build_sta(model, small_sae, data.corpus, 1, top_fraction=0.35)

        assert vector.method is VectorMethod.STA
        assert vector.alpha is not None and vector.beta is not None
        assert vector.top_fraction == 0.35
        assert vector.n_atoms is not None and 0 <= vector.n_atoms <= 32
        assert vector.selection_mode == "full"
        assert len(vector.source_hash) == 64


class TestCaa:
    """Tests for contrastive activation addition."""

    def test_single_item(self):
        """Should subtract the negative state from the positive."""
        assert caa_from_states(as_tensor([[1, 2]]), as_tensor([[0.5, 1]])).tolist() == [0.5, 1.0]

    def test_mean_over_items(self):
        """Should average the per-item differences."""
        out = caa_from_states(as_tensor([[1, 0], [0, 1]]), torch.zeros(2, 2, dtype=DTYPE))
        assert out.tolist() == [0.5, 0.5]

    @given(st.integers(0, 999), st.floats(1e-3, 1e3))
    @settings(max_examples=50)
    def test_scales_linearly_with_activations(self, seed, c):
        """Should scale by c when every activation is scaled by c > 0."""
        pos, neg = _random_means(seed)
        base = caa_from_states(pos, neg)
        scaled = caa_from_states(c * pos, c * neg)
        assert torch.allclose(scaled, c * base, rtol=1e-12, atol=1e-15 * c)

    def test_identical_answers_give_zero(self, model):
        """Should be the zero vector, flagged degenerate, when answers match."""
        corpus = BehaviorCorpus([BehaviorItem((5,), (24,), (24,))])
        vector = caa_vector(model, corpus, layer=1)

        assert float(vector.values.abs().sum()) == 0.0
        assert vector.degenerate

    def test_layer_out_of_range(self, model, data):
        """Should raise ParameterError for a missing layer."""
        with pytest.raises(ParameterError):
            caa_vector(model, data.corpus, layer=2)

    def test_pair_vector_rejects_identical_pair(self, model):
        """Should raise DegenerateInputError for identical long and short answers."""
        with pytest.raises(DegenerateInputError):
            pair_vector(model, BehaviorItem((44,), (52, 53), (52, 53)), layer=1)


class TestMatchMagnitude:
    """Tests for norm matching."""

    def _vector(self, values) -> SteeringVector:
        return SteeringVector(values=as_tensor(values), method=VectorMethod.STA, layer=0)

    def test_scales_to_reference(self):
        """Should rescale a 3-4-5 vector to norm 10."""
        out = match_magnitude(self._vector([3, 4]), self._vector([0, 10]))

        assert out.values.tolist() == pytest.approx([6.0, 8.0], abs=1e-12)
        assert out.extra["matched_to"] == "STA"

    def test_identity(self):
        """Should leave a vector matched to itself unchanged."""
        v = self._vector([0.3, -1.7, 2.2])
        assert torch.allclose(match_magnitude(v, v).values, v.values, atol=1e-12, rtol=0)

    def test_zero_vector_rejected(self):
        """Should raise DegenerateInputError for a zero direction."""
        with pytest.raises(DegenerateInputError):
            match_magnitude(self._vector([0, 0]), self._vector([1, 0]))

    def test_zero_reference_rejected(self):
        """Should raise DegenerateInputError for a zero reference."""
        with pytest.raises(DegenerateInputError):
            match_magnitude(self._vector([1, 0]), self._vector([0, 0]))

    @pytest.mark.parametrize("seed", range(100))
    def test_norms_agree_and_idempotent(self, seed):
        """Should match norms within 1e-9 and be idempotent within 1e-12."""
        g = torch.Generator().manual_seed(seed)
        v = self._vector(torch.randn(16, generator=g, dtype=DTYPE) * 5)
        ref = self._vector(torch.randn(16, generator=g, dtype=DTYPE) * 0.1)

        once = match_magnitude(v, ref)
        twice = match_magnitude(once, ref)
        assert abs(once.norm - ref.norm) <= 1e-9
        assert torch.allclose(twice.values, once.values, atol=1e-12, rtol=0)
        assert cosine_similarity(once.values, v.values) == pytest.approx(1.0, abs=1e-12)


class TestPromptVectors:
    """Tests for prompt conversion."""

    def test_empty_prompt_caa_is_degenerate_zero(self, model):
        """Should return a zero vector flagged degenerate for an empty prompt."""
        vector = prompt_to_vector(model, [], "caa", layer=1)

        assert float(vector.values.abs().sum()) == 0.0
        assert vector.degenerate
        assert vector.method is VectorMethod.PROMPT_CAA

    def test_prompt_caa_is_state_difference(self, model):
        """Should be nonzero for a real prompt."""
        vector = prompt_to_vector(model, [40, 41], "caa", layer=1)

        assert vector.norm > 0
        assert not vector.degenerate

    def test_prompt_sta_needs_sae(self, model):
        """Should raise ConfigurationError without an SAE."""
        with pytest.raises(ConfigurationError):
            prompt_to_vector(model, [40], "sta", layer=1)

    def test_prompt_sta(self, model, small_sae):
        """Should select atoms from the single prompt contrast."""
        vector = prompt_to_vector(model, [40, 41], "sta", layer=1, sae=small_sae)

        assert vector.method is VectorMethod.PROMPT_STA
        assert vector.dim == 16
        assert vector.top_fraction == 0.35

    def test_unknown_method(self, model):
        """Should raise ParameterError for an unknown conversion."""
        with pytest.raises(ParameterError):
            prompt_to_vector(model, [40], "mean", layer=1)  # type: ignore[arg-type]

    def test_prompt_mean(self, model):
        """Should build a mean-over-prompt vector and reject empty prompts."""
        assert prompt_mean_vector(model, [40, 41], layer=0).method is VectorMethod.PROMPT_MEAN
        with pytest.raises(InputError):
            prompt_mean_vector(model, [], layer=0)


class TestBuildVector:
    """Tests for method dispatch."""

    def test_unknown_method(self, model, data):
        """Should raise ParameterError for an unknown method."""
        with pytest.raises(ParameterError):
            build_vector("pca", model, 1, corpus=data.corpus)

    @pytest.mark.parametrize("method", ["sta", "axbench", "prompt-sta"])
    def test_sae_methods_need_sae(self, model, data, method):
        """Should raise ConfigurationError when an SAE method has no SAE."""
        with pytest.raises(ConfigurationError):
            build_vector(method, model, 1, corpus=data.corpus, prompt=[40])

    def test_corpus_methods_need_corpus(self, model, small_sae):
        """Should raise ConfigurationError without a corpus."""
        with pytest.raises(ConfigurationError):
            build_vector("caa", model, 1, sae=small_sae)

    def test_sta_matched_to_caa(self, model, small_sae, data):
        """Should rescale STA to the CAA norm."""
        sta = build_vector("sta", model, 1, corpus=data.corpus, sae=small_sae)
        caa = caa_vector(model, data.corpus, 1)

        assert sta.norm == pytest.approx(caa.norm, abs=1e-9)
        assert sta.extra["matched_to"] == "CAA"

    def test_unmatched_keeps_raw_norm(self, model, small_sae, data):
        """Should skip rescaling with match off."""
        raw = build_sta(model, small_sae, data.corpus, 1)
        unmatched = build_vector("sta", model, 1, corpus=data.corpus, sae=small_sae, match=False)
        assert torch.equal(raw.values, unmatched.values)

    def test_failed_match_is_recorded(self, model, small_sae):
        """Should mark the vector unmatched when the CAA reference is zero."""
        corpus = BehaviorCorpus([BehaviorItem((5,), (24,), (24,))])
        vector = build_vector("sta", model, 1, corpus=corpus, sae=small_sae)

        assert vector.extra["matched_to"] is None
        assert "zero norm" in vector.extra["match_error"]

    def test_prompt_sta_matched_to_prompt_caa(self, model, small_sae):
        """Should rescale prompt-STA to the prompt-CAA norm."""
        vector = build_vector("prompt-sta", model, 1, sae=small_sae, prompt=[40, 41, 42])
        reference = prompt_to_vector(model, [40, 41, 42], "caa", layer=1)
        assert vector.norm == pytest.approx(reference.norm, abs=1e-9)


class TestSteeringVectorSerialization:
    """Tests for the vector JSON form."""

    def test_json_round_trip_is_bitwise(self, model, small_sae, data):
        """Should reload identical values and metadata through JSON text."""
        vector = build_vector("sta", model, 1, corpus=data.corpus, sae=small_sae)
        restored = SteeringVector.from_dict(json.loads(json.dumps(vector.to_dict())))

        assert torch.equal(restored.values, vector.values)
        assert restored.alpha == vector.alpha
        assert restored.n_atoms == vector.n_atoms
        assert restored.extra == vector.extra

    def test_infinite_thresholds_serialize_as_null(self):
        """Should write pass-all thresholds as null."""
        vector = SteeringVector(
            values=as_tensor([1.0, 0.0]), method=VectorMethod.SAE_AXBENCH, layer=0,
            alpha=-math.inf, beta=-math.inf,
        )
        data = vector.to_dict()
        assert data["alpha"] is None and data["beta"] is None
        json.dumps(data, allow_nan=False)

    def test_norm_mismatch_rejected(self):
        """Should raise InputError when the stored norm disagrees with the values."""
        data = SteeringVector(values=as_tensor([3.0, 4.0]), method=VectorMethod.CAA, layer=0).to_dict()
        data["norm"] = 4.0
        with pytest.raises(InputError):
            SteeringVector.from_dict(data)

    def test_dim_mismatch_rejected(self):
        """Should raise InputError when dim disagrees with the values."""
        data = SteeringVector(values=as_tensor([3.0, 4.0]), method=VectorMethod.CAA, layer=0).to_dict()
        data["dim"] = 3
        with pytest.raises(InputError):
            SteeringVector.from_dict(data)
