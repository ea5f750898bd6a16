import numpy as np
import pytest

from pathprune.core import COMPLETED, LAUNCHED, path_to_dict
from pathprune.errors import LifecycleError
from pathprune.simbackend import LatentPath, SimBackend, SimConfig, squash, substream


@pytest.fixture(scope="module")
def backend():
    return SimBackend(SimConfig(seed=7))


@pytest.fixture(scope="module")
def query(backend):
    return backend.sample_queries(1)[0]


class TestSampleQueries:
    def test_deterministic(self):
        a = SimBackend(SimConfig(seed=7)).sample_queries(3)
        b = SimBackend(SimConfig(seed=7)).sample_queries(3)
        assert a == b

    def test_zero_count_gives_empty_list(self, backend):
        assert backend.sample_queries(0) == []

    def test_negative_count_rejected(self, backend):
        with pytest.raises(ValueError):
            backend.sample_queries(-1)

    def test_uniform_difficulty_prior_mean(self):
        # law of large numbers: Beta(1,1) has mean 1/2
        be = SimBackend(SimConfig(seed=3, difficulty_beta_a=1.0, difficulty_beta_b=1.0))
        bases = [q.base_success_prob for q in be.sample_queries(10_000)]
        assert np.mean(bases) == pytest.approx(0.5, abs=0.02)

    def test_ids_unique(self, backend):
        qs = backend.sample_queries(50)
        assert len({q.query_id for q in qs}) == 50


def _mean_logprob_quality_corr(miscalibration, n=1000):
    cfg = SimConfig(seed=11, confidence_miscalibration=miscalibration)
    be = SimBackend(cfg)
    q = be.sample_queries(1)[0]
    means, zs = [], []
    for pid in range(1, n + 1):
        p = be.launch_prefix(q, pid, 64)
        means.append(float(np.mean(p.token_logprobs)))
        zs.append(be.latent_for(q.query_id, pid).quality)
    return float(np.corrcoef(means, zs)[0, 1])


class TestLaunchPrefix:
    def test_calibrated_confidence_tracks_quality(self):
        assert _mean_logprob_quality_corr(0.0) > 0.95

    def test_fully_miscalibrated_confidence_is_uninformative(self):
        assert abs(_mean_logprob_quality_corr(1.0)) < 0.05

    def test_deterministic(self, backend, query):
        assert backend.launch_prefix(query, 1, 48) == backend.launch_prefix(query, 1, 48)

    def test_shape_and_invariants(self, backend, query):
        p = backend.launch_prefix(query, 1, 48)
        assert p.status == LAUNCHED
        assert len(p.tokens) == len(p.token_logprobs) == 48
        assert float(p.token_logprobs.max()) <= 0.0
        assert p.checkpoint_features is not None
        assert p.checkpoint_features.shape == (backend.config.feature_dim,)

    def test_early_finisher_lacks_features(self):
        be = SimBackend(SimConfig(seed=5, length_mean=20.0, length_sigma=0.1))
        q = be.sample_queries(1)[0]
        p = be.launch_prefix(q, 1, 500)
        assert len(p.tokens) < 500
        assert p.checkpoint_features is None


class TestResumeAndRollout:
    def test_forced_limit_cases(self, backend, query):
        prefix = backend.launch_prefix(query, 1, 48)
        wins = [backend.resume_path(prefix, salt=s, success_prob=1.0).is_correct for s in range(50)]
        losses = [backend.resume_path(prefix, salt=s, success_prob=0.0).is_correct for s in range(50)]
        assert all(wins) and not any(losses)

    def test_monte_carlo_convergence_at_fixed_prob(self, backend, query):
        prefix = backend.launch_prefix(query, 2, 48)
        outs = backend.rollout_from_prefix(prefix, 10_000, success_prob=0.3)
        assert np.mean([o.is_correct for o in outs]) == pytest.approx(0.30, abs=0.015)

    def test_rollout_mean_matches_latent_prob(self, backend, query):
        prefix = backend.launch_prefix(query, 3, 48)
        q_true = backend.true_success_prob(query.query_id, 3)
        outs = backend.rollout_from_prefix(prefix, 10_000)
        assert np.mean([o.is_correct for o in outs]) == pytest.approx(q_true, abs=0.01)

    def test_k1_rollout_equals_resume_draw(self, backend, query):
        prefix = backend.launch_prefix(query, 4, 48)
        assert backend.rollout_from_prefix(prefix, 1)[0] == backend.resume_path(prefix)

    def test_rollout_deterministic_and_prefix_consistent(self, backend, query):
        prefix = backend.launch_prefix(query, 5, 48)
        a = backend.rollout_from_prefix(prefix, 6)
        b = backend.rollout_from_prefix(prefix, 6)
        assert a == b
        shorter = backend.rollout_from_prefix(prefix, 3)
        assert shorter == a[:3]

    def test_rollout_leaves_input_untouched(self, backend, query):
        prefix = backend.launch_prefix(query, 6, 48)
        before = path_to_dict(prefix)
        backend.rollout_from_prefix(prefix, 4)
        assert path_to_dict(prefix) == before

    def test_zero_rollouts_rejected(self, backend, query):
        prefix = backend.launch_prefix(query, 7, 48)
        with pytest.raises(ValueError):
            backend.rollout_from_prefix(prefix, 0)

    def test_resume_lifecycle_errors(self, backend, query):
        prefix = backend.launch_prefix(query, 8, 48)
        done = backend.resume_path(prefix)
        assert done.status == COMPLETED and done.answer is not None
        with pytest.raises(LifecycleError):
            backend.resume_path(done)

    def test_completion_extends_prefix(self, backend, query):
        prefix = backend.launch_prefix(query, 9, 48)
        done = backend.resume_path(prefix)
        assert done.num_tokens > prefix.num_tokens
        assert np.array_equal(done.tokens[:48], prefix.tokens)

    def test_different_salts_vary(self, backend, query):
        prefix = backend.launch_prefix(query, 10, 48)
        outcomes = {backend.resume_path(prefix, salt=s).is_correct for s in range(40)}
        assert outcomes == {True, False}


class TestStatisticalProperties:
    def test_estimator_consistency_rate(self, backend, query):
        # mean correctness converges to q(z) at the binomial O(K^-1/2) rate
        prefix = backend.launch_prefix(query, 11, 48)
        q_true = backend.true_success_prob(query.query_id, 11)
        for k in (32, 1024, 10_000):
            outs = backend.rollout_from_prefix(prefix, k)
            err = abs(np.mean([o.is_correct for o in outs]) - q_true)
            assert err <= 4.0 * np.sqrt(q_true * (1 - q_true) / k) + 1.0 / k

    def test_monotone_discriminability(self, backend, query):
        latents = [backend.latent_for(query.query_id, pid) for pid in range(1, 200)]
        by_z = np.argsort([l.quality for l in latents])
        by_q = np.argsort([l.true_success_prob for l in latents])
        assert np.array_equal(by_z, by_q)

    def test_squash_bounds_and_monotone(self):
        zs = np.linspace(-30, 30, 1001)
        qs = np.array([squash(z) for z in zs])
        assert np.all(np.diff(qs) > 0)
        assert qs.min() > 0.0 and qs.max() < 1.0

    def test_latent_matches_squash(self, backend, query):
        lat = backend.latent_for(query.query_id, 1)
        assert isinstance(lat, LatentPath)
        assert lat.true_success_prob == pytest.approx(squash(lat.quality))


class TestJudge:
    def test_zero_noise_judge_is_oracle(self, backend, query):
        judge = backend.judge(noise=0)
        paths = [backend.launch_prefix(query, pid, 32) for pid in range(1, 30)]
        scores = [judge(p) for p in paths]
        zs = [backend.latent_for(query.query_id, p.path_id).quality for p in paths]
        assert np.argsort(scores).tolist() == np.argsort(zs).tolist()

    def test_noisy_judge_deviates(self, backend, query):
        noisy = backend.judge(noise=0.5)
        exact = backend.judge(noise=0)
        p = backend.launch_prefix(query, 1, 32)
        assert noisy(p) != exact(p)


class TestSubstreams:
    def test_stable_across_instances(self):
        a = substream(1, "stage", "q1", 5).standard_normal(4)
        b = substream(1, "stage", "q1", 5).standard_normal(4)
        assert np.array_equal(a, b)

    def test_distinct_keys_decorrelate(self):
        a = substream(1, "stage", "q1", 5).standard_normal(4)
        b = substream(1, "stage", "q1", 6).standard_normal(4)
        assert not np.array_equal(a, b)
