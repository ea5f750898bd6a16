"""Pruning signal generators: one scorer per taxonomy type.

Each generator maps a launched prefix to a promise score in [0, 1] plus the
token-denominated cost of computing that score:

  heuristic  - pairwise token-set diversity (redundancy penalized)
  judge      - an external evaluator re-reads the whole prefix
  confidence - geometric-mean token probability from the decoding byproducts
  learned    - a small trained head over the checkpoint feature vector

Cost model: the judge re-encodes the full prefix (cost = prefix length); the
heuristic's comparison pass is charged at a third of that, matching the
measured latency ratio between the two paradigms; the learned scorer touches
only its handful of appended scoring tokens; confidence statistics are free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import PathRecord
from .errors import ConfigError

GENERATOR_KINDS = ("heuristic", "judge", "confidence", "learned", "random")

DEFAULT_SUPER_TOKENS = 6
DEFAULT_CONFIDENCE_WINDOW = 128
HEURISTIC_COST_DIVISOR = 3

SCORER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SignalScore:
    path_id: int
    value: float
    generator_kind: str
    check_cost_tokens: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"signal value must lie in [0,1], got {self.value}")
        if self.generator_kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.generator_kind!r}")
        if self.check_cost_tokens < 0:
            raise ValueError("check cost must be non-negative")


@dataclass
class ScorerModel:
    """Learnable internal scorer: feature transform plus classification head.

    With use_adapter the features pass through a tanh hidden layer before the
    head; without it the head reads the raw features directly (the ablation
    configuration).
    """

    use_adapter: bool
    adapter_weight: np.ndarray | None  # (hidden, feature_dim)
    adapter_bias: np.ndarray | None  # (hidden,)
    head_weight: np.ndarray  # (hidden,) or (feature_dim,)
    head_bias: float
    super_token_count: int = DEFAULT_SUPER_TOKENS

    def __post_init__(self):
        self.head_weight = np.asarray(self.head_weight, dtype=np.float64)
        if self.use_adapter:
            if self.adapter_weight is None or self.adapter_bias is None:
                raise ConfigError("adapter enabled but adapter parameters missing")
            self.adapter_weight = np.asarray(self.adapter_weight, dtype=np.float64)
            self.adapter_bias = np.asarray(self.adapter_bias, dtype=np.float64)
            h, _ = self.adapter_weight.shape
            if self.adapter_bias.shape != (h,) or self.head_weight.shape != (h,):
                raise ConfigError("scorer dimensions are inconsistent")
        if self.super_token_count < 1:
            raise ConfigError("super_token_count must be >= 1")
        for arr in (self.adapter_weight, self.adapter_bias, self.head_weight):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ConfigError("scorer parameters must be finite")
        if not np.isfinite(self.head_bias):
            raise ConfigError("scorer parameters must be finite")

    @property
    def feature_dim(self) -> int:
        if self.use_adapter:
            return int(self.adapter_weight.shape[1])
        return int(self.head_weight.shape[0])

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Raw classification logits for a (n, feature_dim) batch."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.feature_dim:
            raise ConfigError(
                f"feature dimension {x.shape[1]} does not match scorer ({self.feature_dim})"
            )
        if self.use_adapter:
            hidden = np.tanh(x @ self.adapter_weight.T + self.adapter_bias)
            return hidden @ self.head_weight + self.head_bias
        return x @ self.head_weight + self.head_bias

    @classmethod
    def initialize(
        cls,
        feature_dim: int,
        hidden_dim: int,
        seed: int,
        use_adapter: bool = True,
        super_token_count: int = DEFAULT_SUPER_TOKENS,
    ) -> "ScorerModel":
        """Fan-in scaled symmetric uniform init, zero biases."""
        rng = np.random.default_rng(seed)
        if use_adapter:
            lim1 = 1.0 / np.sqrt(feature_dim)
            lim2 = 1.0 / np.sqrt(hidden_dim)
            return cls(
                use_adapter=True,
                adapter_weight=rng.uniform(-lim1, lim1, size=(hidden_dim, feature_dim)),
                adapter_bias=np.zeros(hidden_dim),
                head_weight=rng.uniform(-lim2, lim2, size=hidden_dim),
                head_bias=0.0,
                super_token_count=super_token_count,
            )
        lim = 1.0 / np.sqrt(feature_dim)
        return cls(
            use_adapter=False,
            adapter_weight=None,
            adapter_bias=None,
            head_weight=rng.uniform(-lim, lim, size=feature_dim),
            head_bias=0.0,
            super_token_count=super_token_count,
        )

    def copy(self) -> "ScorerModel":
        return ScorerModel(
            use_adapter=self.use_adapter,
            adapter_weight=None if self.adapter_weight is None else self.adapter_weight.copy(),
            adapter_bias=None if self.adapter_bias is None else self.adapter_bias.copy(),
            head_weight=self.head_weight.copy(),
            head_bias=float(self.head_bias),
            super_token_count=self.super_token_count,
        )

    def to_json_dict(self) -> dict:
        return {
            "format_version": SCORER_FORMAT_VERSION,
            "use_adapter": self.use_adapter,
            "adapter_weight": None
            if self.adapter_weight is None
            else [[float(v) for v in row] for row in self.adapter_weight],
            "adapter_bias": None
            if self.adapter_bias is None
            else [float(v) for v in self.adapter_bias],
            "head_weight": [float(v) for v in self.head_weight],
            "head_bias": float(self.head_bias),
            "super_token_count": self.super_token_count,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ScorerModel":
        version = d.get("format_version")
        if version != SCORER_FORMAT_VERSION:
            raise ConfigError(f"unsupported scorer format version {version!r}")
        return cls(
            use_adapter=d["use_adapter"],
            adapter_weight=d["adapter_weight"],
            adapter_bias=d["adapter_bias"],
            head_weight=d["head_weight"],
            head_bias=d["head_bias"],
            super_token_count=d.get("super_token_count", DEFAULT_SUPER_TOKENS),
        )

    def save(self, path) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_json_dict(), fp, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "ScorerModel":
        with open(path) as fp:
            return cls.from_json_dict(json.load(fp))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Generators


def _token_ngrams(path: PathRecord, n: int) -> set:
    toks = path.tokens
    if n == 1:
        return set(toks.tolist())
    if len(toks) < n:
        return {tuple(toks.tolist())} if len(toks) else set()
    return {tuple(toks[i : i + n].tolist()) for i in range(len(toks) - n + 1)}


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def heuristic_cost(prefix: PathRecord) -> int:
    return int(np.ceil(prefix.num_tokens / HEURISTIC_COST_DIVISOR))


def score_heuristic(prefixes: Sequence[PathRecord], ngram: int = 1) -> list[SignalScore]:
    """Diversity score: 1 minus the highest token-set Jaccard overlap with
    any sibling prefix. A lone prefix scores 1 by convention."""
    if not prefixes:
        return []
    if len(prefixes) == 1:
        p = prefixes[0]
        return [SignalScore(p.path_id, 1.0, "heuristic", heuristic_cost(p))]
    sets = [_token_ngrams(p, ngram) for p in prefixes]
    out = []
    for i, p in enumerate(prefixes):
        worst = max(_jaccard(sets[i], sets[j]) for j in range(len(prefixes)) if j != i)
        out.append(SignalScore(p.path_id, 1.0 - worst, "heuristic", heuristic_cost(p)))
    return out


def score_confidence(prefix: PathRecord, window: int | None = None) -> SignalScore:
    """Geometric-mean token probability; optionally the minimum over sliding
    windows of the given width (more sensitive to local collapses)."""
    lps = prefix.token_logprobs
    if len(lps) == 0:
        raise ValueError(f"{prefix.query_id}/{prefix.path_id}: empty prefix has no confidence")
    lps = np.asarray(lps, dtype=np.float64)
    if window is None or window >= len(lps):
        mean_lp = float(np.mean(lps))
    else:
        if window < 1:
            raise ValueError("window must be >= 1")
        csum = np.concatenate([[0.0], np.cumsum(lps)])
        sums = csum[window:] - csum[:-window]
        mean_lp = float(np.min(sums)) / window
    return SignalScore(prefix.path_id, float(np.exp(mean_lp)), "confidence", 0)


def score_judge(prefix: PathRecord, judge: Callable[[PathRecord], float]) -> SignalScore:
    """Ask an external judge; its verdict is clamped to [0, 1] and charged at
    full prefix re-encoding cost."""
    raw = float(judge(prefix))
    value = float(np.clip(raw, 0.0, 1.0))
    return SignalScore(prefix.path_id, value, "judge", prefix.num_tokens)


def score_learned(prefix: PathRecord, model: ScorerModel) -> SignalScore:
    """Trained internal scorer over the checkpoint features."""
    if prefix.checkpoint_features is None:
        raise ValueError(
            f"{prefix.query_id}/{prefix.path_id}: no checkpoint features "
            "(path ended before the checkpoint)"
        )
    logit = float(model.logits(prefix.checkpoint_features)[0])
    return SignalScore(prefix.path_id, float(sigmoid(logit)), "learned", model.super_token_count)


def score_random(prefixes: Sequence[PathRecord], rng: np.random.Generator) -> list[SignalScore]:
    """Uniform noise scores: the neutrality baseline, not a taxonomy member."""
    return [SignalScore(p.path_id, float(rng.random()), "random", 0) for p in prefixes]
