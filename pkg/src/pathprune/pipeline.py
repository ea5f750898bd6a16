"""Launch-Check-Resume orchestration.

Stage 1 launches N prefixes per query, stage 2 scores every prefix once at
the checkpoint with the configured signal generator, stage 3 resumes only the
top-k and votes over their answers. Stages are hard barriers: scoring starts
only after every launch settled, resumes only after every score. The ledger
is the single piece of shared mutable state.

Within a run, MetricsReport.avg_at_k equals avg_at_m_given_k (both are the
accuracy over the paths this run completed); the paper-style avg@k baseline
comes from a separate no-pruning run over the same queries.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    COMPLETED,
    PRUNED,
    BudgetLedger,
    MetricsReport,
    PathRecord,
    QueryRecord,
    RetentionPolicy,
    avg_at_k,
    cons_at_n,
    consensus_breakdown,
    dumps_jsonl,
    path_to_dict,
    token_reduction,
)
from .errors import BackendError, ConfigError, EmptyDatasetError
from .signals import (
    ScorerModel,
    SignalScore,
    score_confidence,
    score_heuristic,
    score_judge,
    score_learned,
    score_random,
)
from .simbackend import substream

log = logging.getLogger(__name__)

GENERATORS = ("heuristic", "judge", "confidence", "learned", "random")


@dataclass(frozen=True)
class RunSpec:
    """Everything needed to reproduce one pruning run."""

    launch_count: int
    policy: RetentionPolicy
    generator: str
    seed: int
    backend: str = "sim"
    budget_cap: int | None = None
    confidence_window: int | None = None

    def __post_init__(self):
        if self.launch_count < 1:
            raise ValueError("launch_count must be >= 1")
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; pick one of {GENERATORS}")
        if self.budget_cap is not None and self.budget_cap < 1:
            raise ValueError("budget_cap must be positive when set")
        try:
            self.policy.resolve_k(self.launch_count)
        except ValueError as exc:  # k > N and friends are config mistakes
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policy"] = dataclasses.asdict(self.policy)
        return d


@dataclass
class RunResult:
    retained: dict  # query_id -> [path_id]
    votes: dict  # query_id -> voted answer
    vote_correct: dict  # query_id -> bool
    metrics: MetricsReport
    ledger: BudgetLedger
    paths: list  # every PathRecord, pruned included
    scores: dict = field(default_factory=dict)  # (query_id, path_id) -> SignalScore
    timings: dict = field(default_factory=dict)
    incidents: list = field(default_factory=list)
    budget_exceeded: bool = False


def _map_stage(tasks, fn, jobs: int, query_of):
    """Run fn over tasks, optionally on a worker pool; order is preserved.

    Failures are collected across the whole stage and raised once,
    aggregated per query, so one bad path reports alongside its siblings.
    """
    def safe(task):
        try:
            return fn(task), None
        except Exception as exc:
            return None, (query_of(task), exc)

    if jobs <= 1 or len(tasks) <= 1:
        outcomes = [safe(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(safe, tasks))
    failures: dict[str, list] = {}
    for _, err in outcomes:
        if err is not None:
            failures.setdefault(err[0], []).append(err[1])
    if failures:
        summary = "; ".join(f"{qid}: {len(excs)} failed ({excs[0]})" for qid, excs in sorted(failures.items()))
        raise BackendError(f"backend failures in {len(failures)} queries: {summary}")
    return [value for value, _ in outcomes]


def _score_query(prefixes, spec: RunSpec, scorer_model, judge, incidents) -> list[SignalScore]:
    kind = spec.generator
    if kind == "heuristic":
        return score_heuristic(prefixes)
    if kind == "random":
        rng = substream(spec.seed, "randomsignal", prefixes[0].query_id)
        return score_random(prefixes, rng)
    out = []
    for p in prefixes:
        try:
            if kind == "confidence":
                out.append(score_confidence(p, spec.confidence_window))
            elif kind == "judge":
                out.append(score_judge(p, judge))
            else:
                out.append(score_learned(p, scorer_model))
        except Exception as exc:  # scored 0, never crashes the run
            incidents.append(f"{p.query_id}/{p.path_id}: scoring failed: {exc}")
            log.warning("scoring failure on %s/%s: %s", p.query_id, p.path_id, exc)
            out.append(SignalScore(p.path_id, 0.0, kind, 0))
    return out


def run_with_pruning(
    queries: list[QueryRecord],
    spec: RunSpec,
    backend,
    scorer_model: ScorerModel | None = None,
    judge=None,
    jobs: int = 1,
    baseline_total_tokens: int | None = None,
) -> RunResult:
    """Launch N, score prefixes once, resume the top-k, vote over survivors."""
    if spec.generator == "learned" and scorer_model is None:
        raise ConfigError("generator 'learned' needs a trained ScorerModel")
    if spec.generator == "judge" and judge is None:
        if not hasattr(backend, "judge"):
            raise ConfigError("generator 'judge' needs a judge callable")
        judge = backend.judge()

    if not queries:
        raise EmptyDatasetError("no queries to run")
    n = spec.launch_count
    k = spec.policy.resolve_k(n)
    prefix_len = spec.policy.prefix_length
    ledger = BudgetLedger()
    incidents: list[str] = []
    timings = {}

    t0 = time.perf_counter()
    launch_tasks = [(q, pid) for q in queries for pid in range(1, n + 1)]

    def _launch(task):
        q, pid = task
        rec = backend.launch_prefix(q, pid, prefix_len)
        ledger.charge(prefix=rec.num_tokens)
        return rec

    launched = _map_stage(launch_tasks, _launch, jobs, lambda t: t[0].query_id)
    by_query: dict[str, list[PathRecord]] = {q.query_id: [] for q in queries}
    for rec in launched:
        by_query[rec.query_id].append(rec)
    timings["launch_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    retained: dict[str, list[int]] = {}
    scores: dict[tuple[str, int], SignalScore] = {}
    short_flagged = 0
    for q in queries:
        prefixes = by_query[q.query_id]
        short_flagged += sum(1 for p in prefixes if p.num_tokens < prefix_len)
        query_scores = _score_query(prefixes, spec, scorer_model, judge, incidents)
        for s in query_scores:
            ledger.charge(check=s.check_cost_tokens)
            scores[(q.query_id, s.path_id)] = s
        ranked = sorted(query_scores, key=lambda s: (-s.value, s.path_id))
        retained[q.query_id] = sorted(s.path_id for s in ranked[:k])
    if short_flagged:
        incidents.append(f"{short_flagged} paths ended before the {prefix_len}-token checkpoint")
    timings["check_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    resume_tasks = []
    final_paths: list[PathRecord] = []
    for q in queries:
        keep = set(retained[q.query_id])
        for p in by_query[q.query_id]:
            if p.path_id in keep:
                resume_tasks.append(p)
            else:
                final_paths.append(dataclasses.replace(p, status=PRUNED))

    def _resume(prefix):
        done = backend.resume_path(prefix)
        overhead = backend.resume_overhead_tokens(prefix)
        ledger.charge(resume=done.num_tokens - prefix.num_tokens + overhead)
        return done

    completed = _map_stage(resume_tasks, _resume, jobs, lambda p: p.query_id)
    final_paths.extend(completed)
    final_paths.sort(key=lambda p: (p.query_id, p.path_id))
    timings["resume_s"] = time.perf_counter() - t0

    result = _finalize(
        queries, final_paths, scores, ledger, spec, baseline_total_tokens, retained
    )
    result.timings = timings
    result.incidents = incidents
    return result


def run_no_pruning(
    queries: list[QueryRecord],
    launch_count: int,
    backend,
    prefix_length: int,
    jobs: int = 1,
) -> RunResult:
    """Baseline: complete all N paths, vote over everything, zero check cost."""
    if not queries:
        raise EmptyDatasetError("no queries to run")
    policy = RetentionPolicy(prefix_length=prefix_length, retain_count=launch_count)
    spec = RunSpec(
        launch_count=launch_count, policy=policy, generator="random", seed=0
    )
    ledger = BudgetLedger()
    timings = {}

    t0 = time.perf_counter()
    launch_tasks = [(q, pid) for q in queries for pid in range(1, launch_count + 1)]

    def _launch(task):
        q, pid = task
        rec = backend.launch_prefix(q, pid, prefix_length)
        ledger.charge(prefix=rec.num_tokens)
        return rec

    launched = _map_stage(launch_tasks, _launch, jobs, lambda t: t[0].query_id)
    timings["launch_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def _resume(prefix):
        done = backend.resume_path(prefix)
        overhead = backend.resume_overhead_tokens(prefix)
        ledger.charge(resume=done.num_tokens - prefix.num_tokens + overhead)
        return done

    completed = _map_stage(launched, _resume, jobs, lambda p: p.query_id)
    completed.sort(key=lambda p: (p.query_id, p.path_id))
    timings["resume_s"] = time.perf_counter() - t0

    retained = {q.query_id: sorted(p.path_id for p in completed if p.query_id == q.query_id)
                for q in queries}
    result = _finalize(queries, completed, {}, ledger, spec, None, retained)
    result.timings = timings
    return result


def _finalize(queries, paths, scores, ledger, spec, baseline_total_tokens, retained) -> RunResult:
    gold = {q.query_id: q.gold_answer for q in queries}
    completed = [p for p in paths if p.status == COMPLETED]
    tie_scores = {key: s.value for key, s in scores.items()} or None
    breakdown = consensus_breakdown(completed, gold, tie_scores)

    votes = {e["query_id"]: e.get("voted_answer") for e in breakdown if "voted_answer" in e}
    vote_correct = {
        e["query_id"]: e["vote_correct"] for e in breakdown if e.get("vote_correct") is not None
    }

    accuracy = avg_at_k(completed)
    reduction = None
    if baseline_total_tokens is not None:
        reduction = token_reduction(baseline_total_tokens, ledger.total())
    metrics = MetricsReport(
        avg_at_k=accuracy,
        avg_at_m_given_k=accuracy,
        cons_at_n=cons_at_n(completed, gold, tie_scores),
        token_reduction_pct=reduction,
        per_query_breakdown=breakdown,
    )
    exceeded = spec.budget_cap is not None and ledger.total() > spec.budget_cap
    if exceeded:
        log.warning("budget cap %d exceeded: spent %d tokens", spec.budget_cap, ledger.total())
    return RunResult(
        retained=retained,
        votes=votes,
        vote_correct=vote_correct,
        metrics=metrics,
        ledger=ledger,
        paths=paths,
        scores=scores,
        budget_exceeded=exceeded,
    )


@dataclass(frozen=True)
class SweepPoint:
    launch_count: int
    gamma: float
    retained_k: int
    total_tokens: int
    avg_at_m_given_k: float
    cons_at_n: float


def sweep_gamma(
    queries: list[QueryRecord],
    backend,
    n_grid: list[int],
    gamma_grid: list[float],
    prefix_length: int,
    generator: str,
    seed: int,
    scorer_model: ScorerModel | None = None,
    judge=None,
    jobs: int = 1,
) -> list[SweepPoint]:
    """Run the pipeline over the (N, gamma) grid; one row per grid point.

    The resulting surface feeds the power-law fitter; N indexes the budget
    buckets, gamma the retention aggressiveness.
    """
    if not n_grid or not gamma_grid:
        raise ValueError("sweep grids must be nonempty")
    points = []
    for n in n_grid:
        for gamma in gamma_grid:
            policy = RetentionPolicy(prefix_length=prefix_length, retain_ratio=gamma)
            spec = RunSpec(launch_count=n, policy=policy, generator=generator, seed=seed)
            result = run_with_pruning(
                queries, spec, backend, scorer_model=scorer_model, judge=judge, jobs=jobs
            )
            points.append(
                SweepPoint(
                    launch_count=n,
                    gamma=gamma,
                    retained_k=policy.resolve_k(n),
                    total_tokens=result.ledger.total(),
                    avg_at_m_given_k=result.metrics.avg_at_m_given_k,
                    cons_at_n=result.metrics.cons_at_n,
                )
            )
    return points


def sweep_to_csv(points: list[SweepPoint]) -> str:
    lines = ["launch_count,gamma,retained_k,total_tokens,avg_at_m_given_k,cons_at_n"]
    for p in points:
        lines.append(
            f"{p.launch_count},{p.gamma:.8g},{p.retained_k},{p.total_tokens},"
            f"{p.avg_at_m_given_k:.6f},{p.cons_at_n:.6f}"
        )
    return "\n".join(lines) + "\n"


def sweep_from_csv(text: str) -> list[SweepPoint]:
    rows = text.strip().splitlines()
    points = []
    for line in rows[1:]:
        n, gamma, k, tokens, avg_mk, cons = line.split(",")
        points.append(
            SweepPoint(int(n), float(gamma), int(k), int(tokens), float(avg_mk), float(cons))
        )
    return points


def persist_run(result: RunResult, out_dir, spec_dict: dict) -> None:
    """Write the run directory: spec.json, paths.jsonl, metrics.csv, ledger.json.

    Deliberately excludes timings so reruns are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec_dict, sort_keys=True, indent=1) + "\n")
    (out / "paths.jsonl").write_text(dumps_jsonl(path_to_dict(p) for p in result.paths))
    metrics = result.metrics
    (out / "metrics.csv").write_text(metrics.csv_header() + "\n" + metrics.to_csv_row() + "\n")
    (out / "ledger.json").write_text(json.dumps(result.ledger.as_dict(), sort_keys=True, indent=1) + "\n")
