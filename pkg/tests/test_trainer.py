import numpy as np
import pytest

from pathprune.errors import EmptyDatasetError
from pathprune.labeler import LabeledPrefix, build_dataset
from pathprune.signals import ScorerModel, score_learned, sigmoid
from pathprune.simbackend import SimBackend, SimConfig
from pathprune.trainer import (
    TrainConfig,
    batch_loss,
    loss_gradient,
    soft_bce_loss,
    split_by_query,
    train_scorer,
    validation_accuracy,
)


def spearman(a, b):
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    return float(np.corrcoef(ra, rb)[0, 1])


def labeled(features, target, qid="q0", pid=0):
    # wrap a (features, soft target) pair; the bit vector is synthetic, so
    # fabricate one whose mean is exactly the target
    denom = 8
    hits = int(round(target * denom))
    bits = tuple(i < hits for i in range(denom))
    return LabeledPrefix(qid, pid, tuple(features), hits / denom, denom, bits)


class TestSoftBce:
    def test_symmetric_point(self):
        assert soft_bce_loss(0.0, 0.5) == pytest.approx(np.log(2), abs=1e-12)

    def test_confident_and_right_limit(self):
        assert soft_bce_loss(40.0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form_value(self):
        # -[0.25*log(sigmoid(2)) + 0.75*log(1 - sigmoid(2))]
        assert soft_bce_loss(2.0, 0.25) == pytest.approx(1.627, abs=1e-3)

    def test_numerically_stable_at_extremes(self):
        assert np.isfinite(soft_bce_loss(700.0, 0.0))
        assert np.isfinite(soft_bce_loss(-700.0, 1.0))

    def test_nonfinite_logit_rejected(self):
        with pytest.raises(FloatingPointError):
            soft_bce_loss(float("nan"), 0.5)

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            soft_bce_loss(0.0, 1.2)


class TestGradient:
    def test_zero_at_stationary_point(self):
        # all-zero model emits logit 0, so targets of sigmoid(0) annihilate
        # the gradient everywhere
        model = ScorerModel(
            use_adapter=True,
            adapter_weight=np.zeros((3, 2)),
            adapter_bias=np.zeros(3),
            head_weight=np.zeros(3),
            head_bias=0.0,
        )
        x = np.random.default_rng(0).standard_normal((5, 2))
        grads = loss_gradient(model, x, np.full(5, 0.5))
        for g in grads.values():
            assert np.allclose(g, 0.0, atol=1e-15)

    @pytest.mark.parametrize("use_adapter", [True, False])
    def test_matches_central_finite_differences(self, use_adapter):
        rng = np.random.default_rng(42)
        step = 1e-5
        worst = 0.0
        for trial in range(25):
            model = ScorerModel.initialize(
                feature_dim=4, hidden_dim=3, seed=trial, use_adapter=use_adapter
            )
            x = rng.standard_normal((6, 4))
            s = rng.random(6)
            grads = loss_gradient(model, x, s)

            def numeric(setter):
                plus, minus = model.copy(), model.copy()
                setter(plus, +step)
                setter(minus, -step)
                return (batch_loss(plus, x, s) - batch_loss(minus, x, s)) / (2 * step)

            flat = []
            if use_adapter:
                for i in range(3):
                    for j in range(4):
                        got = numeric(lambda m, d, i=i, j=j: m.adapter_weight.__setitem__((i, j), m.adapter_weight[i, j] + d))
                        flat.append((grads["adapter_weight"][i, j], got))
                    got = numeric(lambda m, d, i=i: m.adapter_bias.__setitem__(i, m.adapter_bias[i] + d))
                    flat.append((grads["adapter_bias"][i], got))
            for i in range(len(model.head_weight)):
                got = numeric(lambda m, d, i=i: m.head_weight.__setitem__(i, m.head_weight[i] + d))
                flat.append((grads["head_weight"][i], got))

            def bump_bias(m, d):
                m.head_bias = m.head_bias + d

            flat.append((grads["head_bias"], numeric(bump_bias)))
            for analytic, numeric_v in flat:
                denom = max(abs(analytic), abs(numeric_v), 1e-8)
                worst = max(worst, abs(analytic - numeric_v) / denom)
        assert worst < 1e-4

    def test_duplicated_batch_has_same_gradient(self):
        model = ScorerModel.initialize(feature_dim=3, hidden_dim=2, seed=1)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        s = rng.random(4)
        single = loss_gradient(model, x, s)
        doubled = loss_gradient(model, np.vstack([x, x]), np.concatenate([s, s]))
        for key in single:
            assert np.allclose(single[key], doubled[key], atol=1e-14)

    def test_empty_batch_rejected(self):
        model = ScorerModel.initialize(feature_dim=3, hidden_dim=2, seed=1)
        with pytest.raises(EmptyDatasetError):
            loss_gradient(model, np.zeros((0, 3)), np.zeros(0))


@pytest.fixture(scope="module")
def separable_dataset():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 6))
    w = np.array([2.0, -1.5, 1.0, 0.0, 0.0, 0.5])
    y = (x @ w > 0).astype(float)
    return [labeled(x[i], y[i], qid=f"q{i % 40}", pid=i) for i in range(400)]


class TestTrainScorer:
    def test_separable_labels_learned(self, separable_dataset):
        cfg = TrainConfig(seed=2, learning_rate=1.0, epochs=80, batch_size=32, hidden_dim=16)
        model, _ = train_scorer(separable_dataset, cfg)
        assert validation_accuracy(model, separable_dataset) > 0.95

    def test_deterministic_under_seed(self, separable_dataset):
        cfg = TrainConfig(seed=7, learning_rate=1.0, epochs=10, batch_size=32, hidden_dim=8)
        m1, log1 = train_scorer(separable_dataset, cfg)
        m2, log2 = train_scorer(separable_dataset, cfg)
        assert np.array_equal(m1.adapter_weight, m2.adapter_weight)
        assert np.array_equal(m1.head_weight, m2.head_weight)
        assert m1.head_bias == m2.head_bias
        assert log1.rows == log2.rows

    def test_train_loss_monotone_under_halving(self, separable_dataset):
        # the rate starts absurdly high to force regressions; rollback plus
        # halving must keep the epoch losses non-increasing
        cfg = TrainConfig(seed=3, learning_rate=50.0, epochs=40, batch_size=64, hidden_dim=8)
        _, trainlog = train_scorer(separable_dataset, cfg)
        losses = [row[1] for row in trainlog.rows]
        for a, b in zip(losses, losses[1:]):
            assert b <= a + 1e-6

    def test_loss_invariant_under_dataset_permutation(self, separable_dataset):
        model = ScorerModel.initialize(feature_dim=6, hidden_dim=8, seed=0)
        x = np.array([r.features for r in separable_dataset])
        s = np.array([r.s_mc for r in separable_dataset])
        perm = np.random.default_rng(1).permutation(len(x))
        assert batch_loss(model, x, s) == pytest.approx(batch_loss(model, x[perm], s[perm]), abs=1e-12)

    def test_identical_labels_warn_but_train(self, caplog):
        rng = np.random.default_rng(5)
        data = [labeled(rng.standard_normal(3), 1.0, qid=f"q{i % 5}", pid=i) for i in range(40)]
        cfg = TrainConfig(seed=1, learning_rate=0.5, epochs=3, batch_size=8, hidden_dim=4)
        with caplog.at_level("WARNING"):
            model, _ = train_scorer(data, cfg)
        assert any("identical" in m for m in caplog.messages)
        assert model is not None

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDatasetError):
            train_scorer([], TrainConfig(seed=0))

    def test_inconsistent_dims_rejected(self):
        data = [labeled([0.0, 1.0], 0.5), labeled([0.0, 1.0, 2.0], 0.5, pid=1)]
        with pytest.raises(ValueError):
            train_scorer(data, TrainConfig(seed=0))

    def test_validation_split_is_by_query(self, separable_dataset):
        train, val = split_by_query(separable_dataset, 0.1, seed=3)
        train_q = {r.query_id for r in train}
        val_q = {r.query_id for r in val}
        assert train_q.isdisjoint(val_q)
        assert len(train) + len(val) == len(separable_dataset)

    def test_adapter_beats_linear_head_on_nonlinear_boundary(self):
        # radial decision boundary: a linear head cannot represent it
        rng = np.random.default_rng(8)
        x = rng.standard_normal((600, 4))
        y = (np.linalg.norm(x[:, :2], axis=1) < 1.0).astype(float)
        data = [labeled(x[i], y[i], qid=f"q{i % 50}", pid=i) for i in range(600)]
        accs = {}
        for use_adapter in (True, False):
            cfg = TrainConfig(
                seed=3, learning_rate=1.0, epochs=120, batch_size=32,
                hidden_dim=24, use_adapter=use_adapter,
            )
            model, _ = train_scorer(data, cfg)
            accs[use_adapter] = validation_accuracy(model, data)
        assert accs[True] > accs[False]

    def test_soft_labels_give_lower_validation_bce_than_hard(self):
        be = SimBackend(SimConfig(seed=17))
        queries = be.sample_queries(40)
        _, soft = build_dataset(queries, be, prefix_length=32, per_query_prefixes=4, k=32)
        _, hard = build_dataset(queries, be, prefix_length=32, per_query_prefixes=4, k=1)
        # common evaluation target: fresh K=32 labels on held-out queries
        eval_q = be.sample_queries(60)[40:]
        _, eval_set = build_dataset(eval_q, be, prefix_length=32, per_query_prefixes=4, k=32)
        x_eval = np.array([r.features for r in eval_set])
        s_eval = np.array([r.s_mc for r in eval_set])
        losses = {}
        for name, data in (("soft", soft), ("hard", hard)):
            cfg = TrainConfig(seed=4, learning_rate=0.5, epochs=40, batch_size=32, hidden_dim=32)
            model, _ = train_scorer(data, cfg)
            losses[name] = batch_loss(model, x_eval, s_eval)
        assert losses["soft"] < losses["hard"]

    def test_sim_trained_scorer_tracks_success_probability(self):
        # train on one split of simulator queries, evaluate rank agreement
        # with the true success probability on held-out paths
        be = SimBackend(SimConfig(seed=13, confidence_miscalibration=0.7))
        queries = be.sample_queries(60)
        _, recs = build_dataset(queries[:48], be, prefix_length=32, per_query_prefixes=4, k=32)
        cfg = TrainConfig(seed=5, learning_rate=0.5, epochs=40, batch_size=32, hidden_dim=32)
        model, _ = train_scorer(recs, cfg)
        scores, truth = [], []
        for q in queries[48:]:
            for pid in range(1, 9):
                p = be.launch_prefix(q, pid, 32)
                if p.checkpoint_features is None:
                    continue
                scores.append(score_learned(p, model).value)
                truth.append(be.true_success_prob(q.query_id, pid))
        assert spearman(scores, truth) > 0.8
