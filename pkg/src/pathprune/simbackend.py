"""Seeded synthetic trajectory backend.

Stands in for a sampled language model: every query gets a latent difficulty,
every path a latent quality z, and all observable artifacts (token streams,
log-probabilities, checkpoint features, final answers) are noisy views of z.
Everything is a pure function of (SimConfig.seed, query_id, path_id, stage),
so runs replay bit-for-bit and concurrent calls need no shared state.

Per-path success probability is q(z), a logistic squashing of z kept inside
(eps, 1-eps) so labels never degenerate to exact 0/1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .core import COMPLETED, LAUNCHED, PathRecord, QueryRecord
from .errors import LifecycleError

SQUASH_EPS = 1e-3

# Log-probability generator: per-token logprob = -LP_BASE * exp(-LP_GAIN * s)
# with multiplicative token noise, where s blends the (rescaled) absolute
# path quality and an independent nuisance draw according to
# confidence_miscalibration.
LP_BASE = 0.7
LP_GAIN = 0.3
LP_TOKEN_SIGMA = 0.3
LP_Z_SCALE = 2.0

_ANSWER_SPACE = 10_000
_ZIPF_EXPONENT = 1.1


def squash(z: float) -> float:
    """Monotone map from latent quality to success probability in (eps, 1-eps)."""
    return float(SQUASH_EPS + (1.0 - 2.0 * SQUASH_EPS) / (1.0 + np.exp(-z)))


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the synthetic model; seed fully determines every sample."""

    seed: int
    feature_dim: int = 16
    vocab_size: int = 4096
    length_mean: float = 300.0
    length_sigma: float = 0.3
    confidence_miscalibration: float = 0.0
    distractor_count: int = 8
    judge_noise: float = 0.0
    difficulty_beta_a: float = 1.0
    difficulty_beta_b: float = 1.0
    path_quality_sigma: float = 1.0
    feature_noise: float = 0.5

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.length_mean <= 0 or self.length_sigma <= 0:
            raise ValueError("length parameters must be positive")
        if not 0.0 <= self.confidence_miscalibration <= 1.0:
            raise ValueError("confidence_miscalibration must lie in [0,1]")
        if self.distractor_count < 1:
            raise ValueError("distractor_count must be >= 1")
        if self.judge_noise < 0:
            raise ValueError("judge_noise must be non-negative")
        if self.difficulty_beta_a <= 0 or self.difficulty_beta_b <= 0:
            raise ValueError("difficulty Beta parameters must be positive")
        if self.path_quality_sigma < 0 or self.feature_noise < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class LatentPath:
    """Hidden state of one path: quality z and its success probability q(z)."""

    quality: float
    true_success_prob: float


def _entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def substream(*parts) -> np.random.Generator:
    """Independent generator keyed by an arbitrary tuple of ints/strings."""
    return np.random.default_rng(np.random.SeedSequence([_entropy(p) for p in parts]))


class SimBackend:
    """Deterministic trajectory sampler implementing launch/resume/rollout."""

    def __init__(self, config: SimConfig):
        self.config = config
        self._feature_dir = self._make_feature_direction()

    def _make_feature_direction(self) -> np.ndarray:
        # Quality lives on the first half of the feature space; the rest is
        # pure nuisance so a learned scorer has something to ignore.
        f = self.config.feature_dim
        rng = substream(self.config.seed, "featmap")
        half = max(1, f // 2)
        direction = np.zeros(f)
        vec = rng.standard_normal(half)
        direction[:half] = vec / np.linalg.norm(vec)
        return direction

    # -- queries -----------------------------------------------------------

    def sample_queries(self, count: int) -> list[QueryRecord]:
        if count < 0:
            raise ValueError("count must be non-negative")
        return [self._make_query(i) for i in range(count)]

    def _make_query(self, index: int) -> QueryRecord:
        base, task_len, gold_int = self._query_draws(index)
        return QueryRecord(
            query_id=f"q{index:06d}",
            prompt=f"synthetic problem {index}",
            gold_answer=str(gold_int),
            task_length_ref=task_len,
            base_success_prob=base,
        )

    def _query_draws(self, index: int):
        rng = substream(self.config.seed, "query", index)
        base = float(rng.beta(self.config.difficulty_beta_a, self.config.difficulty_beta_b))
        task_len = max(1, int(round(float(
            rng.lognormal(np.log(self.config.length_mean), self.config.length_sigma)
        ))))
        gold_int = int(rng.integers(0, _ANSWER_SPACE))
        return base, task_len, gold_int

    @staticmethod
    def _query_index(query_id: str) -> int:
        if not query_id.startswith("q"):
            raise ValueError(f"not a simulator query id: {query_id!r}")
        return int(query_id[1:])

    # -- latents -----------------------------------------------------------

    def latent_for(self, query_id: str, path_id: int) -> LatentPath:
        base, _, _ = self._query_draws(self._query_index(query_id))
        center = _logit(np.clip(base, SQUASH_EPS, 1.0 - SQUASH_EPS))
        rng = substream(self.config.seed, "latent", query_id, path_id)
        z = float(center + self.config.path_quality_sigma * rng.standard_normal())
        return LatentPath(quality=z, true_success_prob=squash(z))

    def true_success_prob(self, query_id: str, path_id: int) -> float:
        return self.latent_for(query_id, path_id).true_success_prob

    def _natural_length(self, query_id: str, path_id: int) -> int:
        # Length the path would run to if never resumed elsewhere; controls
        # early finishers that never reach the checkpoint.
        _, task_len, _ = self._query_draws(self._query_index(query_id))
        rng = substream(self.config.seed, "natlen", query_id, path_id)
        return max(1, int(round(float(rng.lognormal(np.log(task_len), self.config.length_sigma)))))

    # -- launch ------------------------------------------------------------

    def launch_prefix(self, query: QueryRecord, path_id: int, prefix_length: int) -> PathRecord:
        if prefix_length < 1:
            raise ValueError("prefix_length must be >= 1")
        cfg = self.config
        z = self.latent_for(query.query_id, path_id).quality

        n = min(prefix_length, self._natural_length(query.query_id, path_id))
        rng = substream(cfg.seed, "launch", query.query_id, path_id)
        tokens = (cfg.vocab_size * rng.random(n) ** 2.2).astype(np.int32)

        m = cfg.confidence_miscalibration
        nuisance = float(rng.standard_normal())
        signal = (1.0 - m) * (z / LP_Z_SCALE) + m * nuisance
        lp_center = -LP_BASE * np.exp(-LP_GAIN * signal)
        logprobs = lp_center * np.exp(LP_TOKEN_SIGMA * rng.standard_normal(n))

        features = None
        if n >= prefix_length:
            features = z * self._feature_dir + cfg.feature_noise * rng.standard_normal(
                cfg.feature_dim
            )

        return PathRecord(
            query_id=query.query_id,
            path_id=path_id,
            tokens=tokens,
            token_logprobs=logprobs,
            status=LAUNCHED,
            checkpoint_features=features,
        )

    # -- completion --------------------------------------------------------

    def resume_path(
        self, path: PathRecord, salt: int = 0, success_prob: float | None = None
    ) -> PathRecord:
        """Complete a launched path. Deterministic per (path, salt).

        success_prob overrides the latent-derived probability; it exists for
        limit-case checks and is never used by the pipeline.
        """
        return self._complete(path, salt, 0, success_prob)

    def rollout_from_prefix(
        self, path: PathRecord, k: int, salt: int = 0, success_prob: float | None = None
    ) -> list[PathRecord]:
        """K independent completions sharing the prefix; the input is untouched."""
        if k < 1:
            raise ValueError("rollout count must be >= 1")
        return [self._complete(path, salt, j, success_prob) for j in range(k)]

    def _complete(self, path, salt, draw, success_prob):
        if path.status != LAUNCHED:
            raise LifecycleError(
                f"{path.query_id}/{path.path_id}: cannot resume a {path.status} path"
            )
        cfg = self.config
        index = self._query_index(path.query_id)
        base, task_len, gold_int = self._query_draws(index)
        q = self.true_success_prob(path.query_id, path.path_id) if success_prob is None else success_prob

        rng = substream(cfg.seed, "rollout", path.query_id, path.path_id, salt, draw)
        correct = bool(rng.random() < q)

        natural = self._natural_length(path.query_id, path.path_id)
        if natural <= len(path.tokens):
            residual = 0  # finished before the checkpoint; nothing left to emit
        else:
            total = int(round(float(rng.lognormal(np.log(task_len), cfg.length_sigma))))
            residual = max(1, total - len(path.tokens))
        new_tokens = (cfg.vocab_size * rng.random(residual) ** 2.2).astype(np.int32)
        lp_center = float(np.mean(path.token_logprobs)) if len(path.token_logprobs) else -LP_BASE
        new_logprobs = lp_center * np.exp(LP_TOKEN_SIGMA * rng.standard_normal(residual))

        if correct:
            answer = str(gold_int)
        else:
            ranks = np.arange(1, cfg.distractor_count + 1, dtype=float)
            weights = ranks ** -_ZIPF_EXPONENT
            j = int(rng.choice(cfg.distractor_count, p=weights / weights.sum()))
            answer = str((gold_int + j + 1) % _ANSWER_SPACE)

        return PathRecord(
            query_id=path.query_id,
            path_id=path.path_id,
            tokens=np.concatenate([path.tokens, new_tokens]),
            token_logprobs=np.concatenate([path.token_logprobs, new_logprobs.astype(np.float32)]),
            status=COMPLETED,
            checkpoint_features=path.checkpoint_features,
            answer=answer,
            is_correct=correct,
        )

    # -- auxiliary interfaces ----------------------------------------------

    def judge(self, noise: float | None = None, salt: int = 0):
        """Simulated external judge: true success probability plus Gaussian noise.

        With zero noise this is the oracle signal.
        """
        sigma = self.config.judge_noise if noise is None else noise

        def judge_fn(path: PathRecord) -> float:
            q = self.true_success_prob(path.query_id, path.path_id)
            if sigma == 0:
                return q
            rng = substream(self.config.seed, "judge", path.query_id, path.path_id, salt)
            return q + sigma * float(rng.standard_normal())

        return judge_fn

    def resume_overhead_tokens(self, path: PathRecord) -> int:
        """Simulated engine keeps the prefix KV cache resident; resume is free."""
        return 0


def _logit(p) -> float:
    return float(np.log(p / (1.0 - p)))
