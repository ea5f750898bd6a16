import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathprune.core import LAUNCHED, PathRecord
from pathprune.errors import ConfigError
from pathprune.signals import (
    DEFAULT_SUPER_TOKENS,
    ScorerModel,
    SignalScore,
    heuristic_cost,
    score_confidence,
    score_heuristic,
    score_judge,
    score_learned,
    score_random,
    sigmoid,
)


def prefix_of(tokens, pid=1, logprobs=None, features=None):
    lps = logprobs if logprobs is not None else [-0.5] * len(tokens)
    return PathRecord("q0", pid, tokens, lps, status=LAUNCHED, checkpoint_features=features)


class TestHeuristic:
    def test_identical_prefixes_score_zero(self):
        a, b = prefix_of([1, 2, 3], 1), prefix_of([1, 2, 3], 2)
        assert [s.value for s in score_heuristic([a, b])] == [0.0, 0.0]

    def test_disjoint_prefixes_score_one(self):
        a, b = prefix_of([1, 2], 1), prefix_of([3, 4], 2)
        assert [s.value for s in score_heuristic([a, b])] == [1.0, 1.0]

    def test_half_overlap(self):
        # |{1,2,3} & {2,3,4}| / |{1,2,3} | {2,3,4}| = 2/4
        a, b = prefix_of([1, 2, 3], 1), prefix_of([2, 3, 4], 2)
        assert [s.value for s in score_heuristic([a, b])] == [0.5, 0.5]

    def test_single_prefix_scores_one(self):
        scores = score_heuristic([prefix_of([1, 2, 3])])
        assert scores[0].value == 1.0

    def test_redundancy_against_any_sibling_counts(self):
        # c duplicates a; b is disjoint, but a and c still score 0
        a, b, c = prefix_of([1, 2], 1), prefix_of([5, 6], 2), prefix_of([1, 2], 3)
        values = {s.path_id: s.value for s in score_heuristic([a, b, c])}
        assert values[1] == 0.0 and values[3] == 0.0 and values[2] == 1.0

    def test_bigram_variant(self):
        # same unigrams, different order: unigram overlap 1, bigram overlap < 1
        a, b = prefix_of([1, 2, 3], 1), prefix_of([3, 2, 1], 2)
        uni = score_heuristic([a, b])
        bi = score_heuristic([a, b], ngram=2)
        assert uni[0].value == 0.0
        assert bi[0].value > 0.0


class TestConfidence:
    def test_certain_tokens_score_one(self):
        assert score_confidence(prefix_of([1, 2], logprobs=[0.0, 0.0])).value == 1.0

    def test_constant_logprob_closed_form(self):
        s = score_confidence(prefix_of([1, 2, 3], logprobs=[-1.0] * 3))
        assert s.value == pytest.approx(np.exp(-1.0), abs=1e-9)

    def test_mixed_logprobs_closed_form(self):
        s = score_confidence(prefix_of([1, 2], logprobs=[-1.0, -3.0]))
        assert s.value == pytest.approx(np.exp(-2.0), abs=1e-9)

    def test_empty_prefix_rejected(self):
        with pytest.raises(ValueError):
            score_confidence(prefix_of([]))

    def test_window_minimum_is_pessimistic(self):
        lps = [-0.1] * 10 + [-3.0] * 4 + [-0.1] * 10
        p = prefix_of(list(range(24)), logprobs=lps)
        plain = score_confidence(p).value
        windowed = score_confidence(p, window=4).value
        assert windowed == pytest.approx(np.exp(-3.0), abs=1e-9)
        assert windowed < plain

    def test_window_wider_than_prefix_falls_back(self):
        p = prefix_of([1, 2], logprobs=[-1.0, -3.0])
        assert score_confidence(p, window=50).value == pytest.approx(np.exp(-2.0))

    def test_free_check_cost(self):
        assert score_confidence(prefix_of([1, 2])).check_cost_tokens == 0


class TestJudge:
    def test_out_of_range_verdict_clamped(self):
        s = score_judge(prefix_of([1, 2]), judge=lambda p: 1.7)
        assert s.value == 1.0
        s = score_judge(prefix_of([1, 2]), judge=lambda p: -0.4)
        assert s.value == 0.0

    def test_check_cost_is_full_prefix(self):
        p = prefix_of(list(range(2048)))
        assert score_judge(p, judge=lambda p: 0.5).check_cost_tokens == 2048

    def test_judge_failure_propagates(self):
        def broken(path):
            raise RuntimeError("judge offline")

        with pytest.raises(RuntimeError):
            score_judge(prefix_of([1]), judge=broken)


class TestLearned:
    def test_zero_model_scores_half(self):
        model = ScorerModel(
            use_adapter=True,
            adapter_weight=np.zeros((4, 3)),
            adapter_bias=np.zeros(4),
            head_weight=np.zeros(4),
            head_bias=0.0,
        )
        p = prefix_of([1], features=[0.1, 0.2, 0.3])
        assert score_learned(p, model).value == 0.5

    def test_no_adapter_is_plain_linear_head(self):
        w = np.array([0.5, -0.25, 1.0])
        model = ScorerModel(
            use_adapter=False, adapter_weight=None, adapter_bias=None,
            head_weight=w, head_bias=0.1,
        )
        feats = np.array([0.2, 0.4, -0.3])
        expected = float(sigmoid(feats @ w + 0.1))
        p = prefix_of([1], features=feats)
        assert score_learned(p, model).value == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch_is_config_error(self):
        model = ScorerModel.initialize(feature_dim=4, hidden_dim=3, seed=0)
        p = prefix_of([1], features=[0.1, 0.2])
        with pytest.raises(ConfigError):
            score_learned(p, model)

    def test_missing_features_rejected(self):
        model = ScorerModel.initialize(feature_dim=4, hidden_dim=3, seed=0)
        with pytest.raises(ValueError):
            score_learned(prefix_of([1]), model)

    def test_check_cost_is_super_token_count(self):
        model = ScorerModel.initialize(feature_dim=2, hidden_dim=3, seed=0)
        p = prefix_of([1], features=[0.0, 0.0])
        assert score_learned(p, model).check_cost_tokens == DEFAULT_SUPER_TOKENS


class TestScorerModel:
    def test_round_trip_through_json(self, tmp_path):
        model = ScorerModel.initialize(feature_dim=5, hidden_dim=7, seed=3)
        f = tmp_path / "scorer.json"
        model.save(f)
        loaded = ScorerModel.load(f)
        x = np.random.default_rng(0).standard_normal((4, 5))
        assert np.allclose(model.logits(x), loaded.logits(x))

    def test_unknown_version_rejected(self):
        with pytest.raises(ConfigError):
            ScorerModel.from_json_dict({"format_version": 99})

    def test_nonfinite_parameters_rejected(self):
        with pytest.raises(ConfigError):
            ScorerModel(
                use_adapter=False, adapter_weight=None, adapter_bias=None,
                head_weight=np.array([np.inf]), head_bias=0.0,
            )

    def test_inconsistent_dimensions_rejected(self):
        with pytest.raises(ConfigError):
            ScorerModel(
                use_adapter=True,
                adapter_weight=np.zeros((4, 3)),
                adapter_bias=np.zeros(4),
                head_weight=np.zeros(5),
                head_bias=0.0,
            )


class TestInvariants:
    @given(
        st.lists(
            st.lists(st.integers(min_value=0, max_value=30), min_size=1, max_size=12),
            min_size=1,
            max_size=6,
        )
    )
    def test_heuristic_values_in_unit_interval(self, token_lists):
        prefixes = [prefix_of(toks, pid=i) for i, toks in enumerate(token_lists)]
        for s in score_heuristic(prefixes):
            assert 0.0 <= s.value <= 1.0

    @given(st.lists(st.floats(min_value=-20.0, max_value=0.0), min_size=1, max_size=40))
    def test_confidence_values_in_unit_interval(self, lps):
        s = score_confidence(prefix_of(list(range(len(lps))), logprobs=lps))
        assert 0.0 < s.value <= 1.0

    @given(st.floats(allow_nan=False, allow_infinity=False, width=32))
    def test_judge_always_clamped(self, verdict):
        s = score_judge(prefix_of([1]), judge=lambda p: verdict)
        assert 0.0 <= s.value <= 1.0

    @given(st.lists(st.floats(min_value=-5, max_value=5), min_size=3, max_size=3))
    def test_learned_values_in_unit_interval(self, feats):
        model = ScorerModel.initialize(feature_dim=3, hidden_dim=4, seed=1)
        s = score_learned(prefix_of([1], features=feats), model)
        assert 0.0 <= s.value <= 1.0

    def test_generators_are_pure(self):
        p = prefix_of([1, 2, 3], logprobs=[-0.3, -0.7, -0.2], features=[0.4, -0.1, 0.2])
        model = ScorerModel.initialize(feature_dim=3, hidden_dim=4, seed=1)
        assert score_confidence(p) == score_confidence(p)
        assert score_learned(p, model) == score_learned(p, model)
        assert score_heuristic([p]) == score_heuristic([p])

    def test_check_cost_paradigm_ordering(self):
        # judge re-encodes everything, the heuristic pass is ~1/3 of that,
        # the learned scorer touches only its super tokens
        p = prefix_of(list(range(2048)), features=[0.0, 0.0, 0.0])
        model = ScorerModel.initialize(feature_dim=3, hidden_dim=4, seed=1)
        judge_cost = score_judge(p, judge=lambda _: 0.5).check_cost_tokens
        heur_cost = heuristic_cost(p)
        learned_cost = score_learned(p, model).check_cost_tokens
        assert judge_cost > heur_cost > learned_cost

    def test_signal_score_validation(self):
        with pytest.raises(ValueError):
            SignalScore(1, 1.4, "judge")
        with pytest.raises(ValueError):
            SignalScore(1, 0.5, "telepathy")
        with pytest.raises(ValueError):
            SignalScore(1, 0.5, "judge", check_cost_tokens=-1)

    def test_random_scores_unit_interval(self):
        prefixes = [prefix_of([i], pid=i) for i in range(10)]
        rng = np.random.default_rng(0)
        for s in score_random(prefixes, rng):
            assert 0.0 <= s.value <= 1.0 and s.generator_kind == "random"
