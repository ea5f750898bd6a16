"""Monte-Carlo supervision for the learned scorer.

A launched prefix is labeled with the empirical success rate of K independent
continuations. Queries are first stratified by difficulty: problems the
backend nearly always solves (or nearly never solves) carry no pruning signal
and are dropped before labeling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import LAUNCHED, PathRecord, QueryRecord, dumps_jsonl, loads_jsonl
from .errors import EmptyDatasetError

log = logging.getLogger(__name__)

DEFAULT_ROLLOUTS = 32
DEFAULT_PASS_LOWER = 4
DEFAULT_PASS_UPPER = 28
DEFAULT_PREFIXES_PER_QUERY = 4

# Salt offsets keep stratification, labeling, and evaluation draws disjoint.
_STRATIFY_SALT = 101
_LABEL_SALT = 202


@dataclass(frozen=True)
class LabeledPrefix:
    """(prefix, success probability) supervision pair.

    s_mc is exactly the mean of the per-rollout correctness bits; the bits
    themselves are retained so label variance can be audited later.
    """

    query_id: str
    path_id: int
    features: tuple
    s_mc: float
    k: int
    rollout_correct: tuple

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rollout count must be >= 1")
        if len(self.rollout_correct) != self.k:
            raise ValueError("rollout bits must have length K")
        expected = sum(bool(b) for b in self.rollout_correct) / self.k
        if self.s_mc != expected:
            raise ValueError(f"s_mc {self.s_mc} is not the mean of the rollout bits ({expected})")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "path_id": self.path_id,
            "features": [float(v) for v in self.features],
            "s_mc": self.s_mc,
            "K": self.k,
            "rollout_correct": [int(b) for b in self.rollout_correct],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledPrefix":
        return cls(
            query_id=d["query_id"],
            path_id=d["path_id"],
            features=tuple(d["features"]),
            s_mc=d["s_mc"],
            k=d["K"],
            rollout_correct=tuple(bool(b) for b in d["rollout_correct"]),
        )


def stratify_queries(
    queries: list[QueryRecord],
    backend,
    rollouts: int = DEFAULT_ROLLOUTS,
    lower: int = DEFAULT_PASS_LOWER,
    upper: int = DEFAULT_PASS_UPPER,
    prefix_length: int = 64,
) -> list[QueryRecord]:
    """Keep queries whose pass count over `rollouts` full paths lies in
    [lower, upper] inclusive."""
    if not 0 <= lower <= upper <= rollouts:
        raise ValueError(f"stratification bounds must satisfy 0 <= {lower} <= {upper} <= {rollouts}")
    kept = []
    for query in queries:
        passes = 0
        for pid in range(1, rollouts + 1):
            prefix = backend.launch_prefix(query, pid, prefix_length)
            done = backend.resume_path(prefix, salt=_STRATIFY_SALT)
            passes += int(bool(done.is_correct))
        if lower <= passes <= upper:
            kept.append(query)
    return kept


def mc_label(prefix: PathRecord, backend, k: int, salt: int = 0) -> LabeledPrefix:
    """Label one launched prefix with the mean correctness of K rollouts."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if prefix.status != LAUNCHED:
        raise ValueError(f"{prefix.query_id}/{prefix.path_id}: can only label a launched prefix")
    completions = backend.rollout_from_prefix(prefix, k, salt=salt)
    bits = tuple(bool(c.is_correct) for c in completions)
    features = () if prefix.checkpoint_features is None else tuple(
        float(v) for v in prefix.checkpoint_features
    )
    return LabeledPrefix(
        query_id=prefix.query_id,
        path_id=prefix.path_id,
        features=features,
        s_mc=sum(bits) / k,
        k=k,
        rollout_correct=bits,
    )


def build_dataset(
    queries: list[QueryRecord],
    backend,
    prefix_length: int,
    per_query_prefixes: int = DEFAULT_PREFIXES_PER_QUERY,
    k: int = DEFAULT_ROLLOUTS,
) -> tuple[dict, list[LabeledPrefix]]:
    """Label per_query_prefixes independent prefixes for every query.

    Returns a provenance header plus the labeled records; stratification is
    assumed to have happened already.
    """
    if not queries:
        raise EmptyDatasetError("no queries to label")
    if per_query_prefixes < 1:
        raise ValueError("per_query_prefixes must be >= 1")
    records = []
    skipped = 0
    for query in queries:
        for pid in range(1, per_query_prefixes + 1):
            prefix = backend.launch_prefix(query, pid, prefix_length)
            if prefix.checkpoint_features is None:
                skipped += 1  # finished before the checkpoint; nothing to score later
                continue
            records.append(mc_label(prefix, backend, k, salt=_LABEL_SALT))
    if skipped:
        log.warning("skipped %d prefixes that ended before the checkpoint", skipped)
    header = {
        "kind": "labeled-prefix-dataset",
        "seed": backend.config.seed,
        "K": k,
        "prefix_length": prefix_length,
        "per_query_prefixes": per_query_prefixes,
        "count": len(records),
    }
    return header, records


def dataset_to_jsonl(header: dict, records: list[LabeledPrefix]) -> str:
    return dumps_jsonl([header] + [r.to_dict() for r in records])


def dataset_from_jsonl(text: str) -> tuple[dict, list[LabeledPrefix]]:
    rows = loads_jsonl(text)
    if not rows or rows[0].get("kind") != "labeled-prefix-dataset":
        raise ValueError("not a labeled-prefix dataset (missing header record)")
    return rows[0], [LabeledPrefix.from_dict(d) for d in rows[1:]]


def label_variance(labels: list[LabeledPrefix]) -> float:
    """Empirical variance of s_mc across repeated labelings of one prefix."""
    values = np.array([l.s_mc for l in labels], dtype=np.float64)
    if len(values) < 2:
        raise ValueError("variance needs at least two labelings")
    return float(np.var(values, ddof=1))
