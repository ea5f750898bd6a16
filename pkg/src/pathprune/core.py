"""Domain types and evaluation metrics for parallel reasoning with path pruning.

The unit of work is a query with N sampled trajectories ("paths"). A path is
launched (prefix only), then either pruned or resumed to completion. Metrics
follow the standard parallel-reasoning conventions: avg@k is macro-averaged
per-path accuracy, cons@n is majority-vote accuracy.
"""

from __future__ import annotations

import json
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyDatasetError, LifecycleError

LAUNCHED = "launched"
PRUNED = "pruned"
COMPLETED = "completed"
_STATUSES = (LAUNCHED, PRUNED, COMPLETED)


@dataclass(frozen=True)
class QueryRecord:
    """One problem instance.

    base_success_prob is the simulator's latent per-path success rate; real
    backends leave it None. task_length_ref is the reference completion
    length in tokens used by the retention planner.
    """

    query_id: str
    prompt: str
    gold_answer: str
    task_length_ref: int
    base_success_prob: float | None = None

    def __post_init__(self):
        if self.task_length_ref < 1:
            raise ValueError(f"task_length_ref must be >= 1, got {self.task_length_ref}")
        if self.base_success_prob is not None and not 0.0 <= self.base_success_prob <= 1.0:
            raise ValueError(f"base_success_prob must lie in [0,1], got {self.base_success_prob}")


def _frozen_array(values, dtype):
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PathRecord:
    """One trajectory: token stream, per-token log-probabilities, lifecycle.

    checkpoint_features is the fixed-width feature vector captured at the
    prefix checkpoint; it is absent when the path finished before reaching
    the checkpoint. answer/is_correct are set only once completed.
    """

    query_id: str
    path_id: int
    tokens: np.ndarray
    token_logprobs: np.ndarray
    status: str = LAUNCHED
    checkpoint_features: np.ndarray | None = None
    answer: str | None = None
    is_correct: bool | None = None
    text: str | None = None  # raw completion text, HTTP backend only

    def __post_init__(self):
        object.__setattr__(self, "tokens", _frozen_array(self.tokens, np.int32))
        object.__setattr__(self, "token_logprobs", _frozen_array(self.token_logprobs, np.float32))
        if self.checkpoint_features is not None:
            object.__setattr__(
                self, "checkpoint_features", _frozen_array(self.checkpoint_features, np.float64)
            )
        if len(self.tokens) != len(self.token_logprobs):
            raise ValueError(
                f"{self.query_id}/{self.path_id}: {len(self.tokens)} tokens vs "
                f"{len(self.token_logprobs)} logprobs"
            )
        if len(self.token_logprobs) and float(self.token_logprobs.max()) > 0.0:
            raise ValueError("token log-probabilities must be <= 0")
        if self.status not in _STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == COMPLETED and self.answer is None:
            raise LifecycleError(f"{self.query_id}/{self.path_id}: completed without an answer")
        if self.status != COMPLETED and self.answer is not None:
            raise LifecycleError(f"{self.query_id}/{self.path_id}: answer set on {self.status} path")
        if self.is_correct is not None and self.status != COMPLETED:
            raise LifecycleError(f"{self.query_id}/{self.path_id}: correctness set before completion")

    def __eq__(self, other):
        if not isinstance(other, PathRecord):
            return NotImplemented
        return path_to_dict(self) == path_to_dict(other)

    @property
    def num_tokens(self) -> int:
        return int(len(self.tokens))


@dataclass(frozen=True)
class RetentionPolicy:
    """How many of the launched paths survive the checkpoint.

    Exactly one of retain_count (k) and retain_ratio (gamma) is set; a ratio
    resolves to round(gamma * N), clamped to at least one path. Ties at the
    cut rank go to the rule named by tie_break (only "path_id" is defined:
    lower id wins, which keeps replays deterministic).
    """

    prefix_length: int
    retain_count: int | None = None
    retain_ratio: float | None = None
    tie_break: str = "path_id"

    def __post_init__(self):
        if self.prefix_length < 1:
            raise ValueError("prefix_length must be >= 1")
        if (self.retain_count is None) == (self.retain_ratio is None):
            raise ValueError("set exactly one of retain_count and retain_ratio")
        if self.retain_count is not None and self.retain_count < 1:
            raise ValueError("retain_count must be >= 1")
        if self.retain_ratio is not None and not 0.0 < self.retain_ratio <= 1.0:
            raise ValueError("retain_ratio must lie in (0, 1]")
        if self.tie_break != "path_id":
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")

    def resolve_k(self, launch_count: int) -> int:
        """Number of paths to retain out of launch_count."""
        if self.retain_count is not None:
            if self.retain_count > launch_count:
                raise ValueError(
                    f"retain_count {self.retain_count} exceeds launch_count {launch_count}"
                )
            return self.retain_count
        k = int(np.floor(self.retain_ratio * launch_count + 0.5))
        return max(1, min(k, launch_count))


class BudgetLedger:
    """Token accounting for one run, split by pipeline stage.

    The only mutable shared state in a run; increments are atomic so
    concurrent workers can charge it directly. Counters never decrease.
    """

    def __init__(self, prefix_tokens: int = 0, resume_tokens: int = 0, check_tokens: int = 0):
        for name, v in (("prefix", prefix_tokens), ("resume", resume_tokens), ("check", check_tokens)):
            if v < 0:
                raise ValueError(f"{name}_tokens must be non-negative")
        self._lock = threading.Lock()
        self.prefix_tokens = int(prefix_tokens)
        self.resume_tokens = int(resume_tokens)
        self.check_tokens = int(check_tokens)

    def charge(self, prefix: int = 0, resume: int = 0, check: int = 0) -> None:
        if prefix < 0 or resume < 0 or check < 0:
            raise ValueError("ledger charges must be non-negative")
        with self._lock:
            self.prefix_tokens += int(prefix)
            self.resume_tokens += int(resume)
            self.check_tokens += int(check)

    def total(self) -> int:
        return self.prefix_tokens + self.resume_tokens + self.check_tokens

    def as_dict(self) -> dict:
        return {
            "prefix_tokens": self.prefix_tokens,
            "resume_tokens": self.resume_tokens,
            "check_tokens": self.check_tokens,
            "total_tokens": self.total(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BudgetLedger":
        return cls(d["prefix_tokens"], d["resume_tokens"], d["check_tokens"])

    def __repr__(self):
        return (
            f"BudgetLedger(prefix={self.prefix_tokens}, resume={self.resume_tokens}, "
            f"check={self.check_tokens}, total={self.total()})"
        )


@dataclass
class MetricsReport:
    """Per-run evaluation summary.

    token_reduction_pct compares this run's ledger against a baseline run's
    total and is None when no baseline was supplied.
    """

    avg_at_k: float
    avg_at_m_given_k: float
    cons_at_n: float
    token_reduction_pct: float | None = None
    per_query_breakdown: list = field(default_factory=list)

    CSV_FIELDS = ("avg_at_k", "avg_at_m_given_k", "cons_at_n", "token_reduction_pct", "n_queries")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def to_csv_row(self) -> str:
        red = "" if self.token_reduction_pct is None else f"{self.token_reduction_pct:.4f}"
        return (
            f"{self.avg_at_k:.6f},{self.avg_at_m_given_k:.6f},{self.cons_at_n:.6f},"
            f"{red},{len(self.per_query_breakdown)}"
        )

    def to_json_dict(self) -> dict:
        return {
            "avg_at_k": self.avg_at_k,
            "avg_at_m_given_k": self.avg_at_m_given_k,
            "cons_at_n": self.cons_at_n,
            "token_reduction_pct": self.token_reduction_pct,
            "per_query_breakdown": self.per_query_breakdown,
        }


# ---------------------------------------------------------------------------
# Metrics


def _group_by_query(records: Iterable[PathRecord]) -> dict[str, list[PathRecord]]:
    groups: dict[str, list[PathRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.query_id].append(rec)
    return dict(groups)


def avg_at_k(records: Iterable[PathRecord]) -> float:
    """Mean per-path accuracy, macro-averaged over queries.

    Every record must be completed with known correctness.
    """
    groups = _group_by_query(records)
    if not groups:
        raise EmptyDatasetError("avg_at_k needs at least one completed path")
    per_query = []
    for qid, recs in groups.items():
        for r in recs:
            if r.status != COMPLETED or r.is_correct is None:
                raise LifecycleError(f"{qid}/{r.path_id}: avg_at_k needs completed, judged paths")
        per_query.append(float(np.mean([r.is_correct for r in recs])))
    return float(np.mean(per_query))


def majority_vote(answers: Sequence[str], tie_scores: Sequence[float] | None = None) -> str:
    """Most frequent answer after whitespace trimming.

    Count ties are broken by the higher mean tie_score among the tied answer
    groups, then by lexicographically smallest answer.
    """
    if not answers:
        raise EmptyDatasetError("majority_vote needs at least one answer")
    trimmed = [a.strip() for a in answers]
    if tie_scores is not None and len(tie_scores) != len(trimmed):
        raise ValueError("tie_scores must align with answers")
    counts = Counter(trimmed)
    top = max(counts.values())
    tied = sorted(a for a, c in counts.items() if c == top)
    if len(tied) == 1 or tie_scores is None:
        return tied[0]
    score_sums: dict[str, list[float]] = defaultdict(list)
    for ans, s in zip(trimmed, tie_scores):
        score_sums[ans].append(float(s))
    means = {a: float(np.mean(score_sums[a])) for a in tied}
    return min(tied, key=lambda a: (-means[a], a))


def token_reduction(tokens_original: int, tokens_pruned: int) -> float:
    """Relative token saving of a pruned run against its baseline, in percent."""
    if tokens_original < 0 or tokens_pruned < 0:
        raise ValueError("token counts must be non-negative")
    if tokens_original == 0:
        raise ZeroDivisionError("token_reduction undefined for zero original tokens")
    return (tokens_original - tokens_pruned) / tokens_original * 100.0


def consensus_breakdown(
    records: Iterable[PathRecord],
    gold_answers: Mapping[str, str],
    tie_scores: Mapping[tuple[str, int], float] | None = None,
) -> list[dict]:
    """Per-query majority vote vs. gold answer.

    Queries without a single completed path are reported with an error entry
    instead of a vote; callers exclude them from aggregate rates.
    """
    groups = _group_by_query(records)
    if not groups:
        raise EmptyDatasetError("consensus needs at least one path")
    out = []
    for qid in sorted(groups):
        completed = [r for r in groups[qid] if r.status == COMPLETED]
        if not completed:
            out.append({"query_id": qid, "error": "no completed paths"})
            continue
        answers = [r.answer for r in completed]
        scores = None
        if tie_scores is not None:
            scores = [tie_scores.get((qid, r.path_id), 0.0) for r in completed]
        voted = majority_vote(answers, scores)
        gold = gold_answers.get(qid)
        entry = {
            "query_id": qid,
            "voted_answer": voted,
            "n_completed": len(completed),
            "vote_correct": None if gold is None else voted == gold.strip(),
        }
        out.append(entry)
    return out


def cons_at_n(
    records: Iterable[PathRecord],
    gold_answers: Mapping[str, str],
    tie_scores: Mapping[tuple[str, int], float] | None = None,
) -> float:
    """Fraction of queries whose majority-voted answer matches gold."""
    breakdown = consensus_breakdown(records, gold_answers, tie_scores)
    judged = [e["vote_correct"] for e in breakdown if e.get("vote_correct") is not None]
    if not judged:
        raise EmptyDatasetError("cons_at_n: no query had a completed, judged vote")
    return float(np.mean(judged))


# ---------------------------------------------------------------------------
# Serialization (JSONL datasets, run artifacts)


def query_to_dict(q: QueryRecord) -> dict:
    return {
        "query_id": q.query_id,
        "prompt": q.prompt,
        "gold_answer": q.gold_answer,
        "task_length_ref": q.task_length_ref,
        "base_success_prob": q.base_success_prob,
    }


def query_from_dict(d: Mapping) -> QueryRecord:
    return QueryRecord(
        query_id=d["query_id"],
        prompt=d["prompt"],
        gold_answer=d["gold_answer"],
        task_length_ref=d["task_length_ref"],
        base_success_prob=d.get("base_success_prob"),
    )


def path_to_dict(p: PathRecord) -> dict:
    return {
        "query_id": p.query_id,
        "path_id": p.path_id,
        "tokens": [int(t) for t in p.tokens],
        "token_logprobs": [float(v) for v in p.token_logprobs],
        "status": p.status,
        "checkpoint_features": None
        if p.checkpoint_features is None
        else [float(v) for v in p.checkpoint_features],
        "answer": p.answer,
        "is_correct": p.is_correct,
        "text": p.text,
    }


def path_from_dict(d: Mapping) -> PathRecord:
    return PathRecord(
        query_id=d["query_id"],
        path_id=d["path_id"],
        tokens=d["tokens"],
        token_logprobs=d["token_logprobs"],
        status=d["status"],
        checkpoint_features=d.get("checkpoint_features"),
        answer=d.get("answer"),
        is_correct=d.get("is_correct"),
        text=d.get("text"),
    )


def dumps_jsonl(dicts: Iterable[Mapping]) -> str:
    """Stable JSONL encoding: sorted keys, no whitespace drift."""
    return "".join(json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n" for d in dicts)


def loads_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
