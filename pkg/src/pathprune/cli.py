"""Operator surface: config-driven subcommands wiring the modules into
reproducible experiments.

One JSON config describes an experiment; every subcommand reads it, writes
its artifacts under the output directory, and prints a single machine-
parsable summary line. All randomness flows from the global seed through
named substreams, so any artifact can be regenerated from its config alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import RetentionPolicy, dumps_jsonl, loads_jsonl, query_from_dict, query_to_dict
from .errors import ConfigError, DependencyError, PathPruneError
from .labeler import build_dataset, dataset_from_jsonl, dataset_to_jsonl, stratify_queries
from .llm_client import EndpointConfig, HttpBackend
from .pipeline import (
    GENERATORS,
    RunSpec,
    persist_run,
    run_no_pruning,
    run_with_pruning,
    sweep_from_csv,
    sweep_gamma,
    sweep_to_csv,
)
from .scaling import (
    PAPER_COEFFICIENTS,
    ScalingCoefficients,
    coefficients_from_json,
    coefficients_to_json,
    emit_lookup_tables,
    extract_optimal_gamma,
    fit_powerlaw,
)
from .signals import ScorerModel
from .simbackend import SimBackend, SimConfig, substream
from .trainer import TrainConfig, train_scorer

log = logging.getLogger(__name__)


def derive_seed(global_seed: int, component: str) -> int:
    """Named substream seed so components can be re-seeded independently."""
    return int(substream(global_seed, component).integers(0, 2 ** 63))


# ---------------------------------------------------------------------------
# Config loading


def _get(cfg: dict, path: str, default=None, required=False):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"{path}: required key is missing")
            return default
        node = node[part]
    return node


def _expect(value, path: str, types, predicate=None, what=""):
    if not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")
    if predicate is not None and not predicate(value):
        raise ConfigError(f"{path}: {what}")
    return value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """--set key.path=value; values parse as JSON literals, else strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
        node[parts[-1]] = value
    return cfg


class Experiment:
    """Validated experiment config plus lazily-built components."""

    def __init__(self, cfg: dict, out_dir: Path, jobs: int):
        self.cfg = cfg
        self.out = out_dir
        self.jobs = jobs
        self.seed = _expect(_get(cfg, "seed", required=True), "seed", int)
        backend = _expect(_get(cfg, "backend", required=True), "backend", dict)
        kind = _get(backend, "kind", required=True)
        if kind not in ("sim", "endpoint"):
            raise ConfigError("backend.kind: must be 'sim' or 'endpoint'")
        self.backend_kind = kind

    # -- components --------------------------------------------------------

    def backend(self):
        block = self.cfg["backend"]
        if self.backend_kind == "sim":
            params = {k: v for k, v in block.items() if k != "kind"}
            try:
                return SimBackend(SimConfig(seed=derive_seed(self.seed, "backend"), **params))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backend: {exc}") from exc
        params = {k: v for k, v in block.items() if k != "kind"}
        if "answer_patterns" in params:
            params["answer_patterns"] = tuple(params["answer_patterns"])
        try:
            return HttpBackend(EndpointConfig(**params))
        except TypeError as exc:
            raise ConfigError(f"backend: {exc}") from exc

    def run_spec(self) -> tuple[RunSpec | None, int, int]:
        block = _expect(_get(self.cfg, "run", required=True), "run", dict)
        n = _expect(_get(block, "launch_count", required=True), "run.launch_count", int)
        prefix_length = _expect(
            _get(block, "prefix_length", required=True), "run.prefix_length", int
        )
        generator = _get(block, "generator", "confidence")
        k = _get(block, "retain_count")
        gamma = _get(block, "retain_ratio")
        if (k is None) == (gamma is None):
            raise ConfigError("run: set exactly one of retain_count and retain_ratio")
        if generator != "none" and generator not in GENERATORS:
            raise ConfigError(
                f"run.generator: {generator!r} is not one of {GENERATORS + ('none',)}"
            )
        try:
            policy = RetentionPolicy(
                prefix_length=prefix_length, retain_count=k, retain_ratio=gamma
            )
        except ValueError as exc:
            raise ConfigError(f"run: {exc}") from exc
        if generator == "none":
            return None, n, prefix_length
        try:
            spec = RunSpec(
                launch_count=n,
                policy=policy,
                generator=generator,
                seed=derive_seed(self.seed, "pipeline"),
                backend=self.backend_kind,
                budget_cap=_get(block, "budget_cap"),
                confidence_window=_get(block, "confidence_window"),
            )
        except ValueError as exc:
            raise ConfigError(f"run: {exc}") from exc
        return spec, n, prefix_length

    # -- artifact plumbing ----------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str, produced_by: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing {p}; run `pathprune {produced_by}` first")
        return p

    def load_queries(self):
        text = self.need("queries.jsonl", "simulate").read_text()
        return [query_from_dict(d) for d in loads_jsonl(text)]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(exp: Experiment) -> str:
    count = _expect(_get(exp.cfg, "labeler.query_count", 100), "labeler.query_count", int)
    backend = exp.backend()
    if not hasattr(backend, "sample_queries"):
        raise ConfigError("backend.kind: only the sim backend can synthesize queries")
    queries = backend.sample_queries(count)
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("queries.jsonl").write_text(dumps_jsonl(query_to_dict(q) for q in queries))
    return f"simulate ok queries={len(queries)} out={exp.path('queries.jsonl')}"


def cmd_label(exp: Experiment) -> str:
    queries = exp.load_queries()
    backend = exp.backend()
    block = _get(exp.cfg, "labeler", {})
    prefix_length = _expect(
        _get(block, "prefix_length", required=True), "labeler.prefix_length", int
    )
    rollouts = _get(block, "stratify_rollouts", 32)
    lower, upper = _get(block, "lower", 4), _get(block, "upper", 28)
    retained = stratify_queries(
        queries, backend, rollouts=rollouts, lower=lower, upper=upper,
        prefix_length=prefix_length,
    )
    header, records = build_dataset(
        retained,
        backend,
        prefix_length=prefix_length,
        per_query_prefixes=_get(block, "per_query_prefixes", 4),
        k=_get(block, "K", 32),
    )
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("labeled.jsonl").write_text(dataset_to_jsonl(header, records))
    return (
        f"label ok kept={len(retained)}/{len(queries)} records={len(records)} "
        f"out={exp.path('labeled.jsonl')}"
    )


def cmd_train(exp: Experiment) -> str:
    header, records = dataset_from_jsonl(exp.need("labeled.jsonl", "label").read_text())
    block = _get(exp.cfg, "trainer", {})
    try:
        config = TrainConfig(
            seed=derive_seed(exp.seed, "trainer"),
            learning_rate=_get(block, "learning_rate", 2e-5),
            batch_size=_get(block, "batch_size", 16),
            epochs=_get(block, "epochs", 15),
            hidden_dim=_get(block, "hidden_dim", 32),
            use_adapter=_get(block, "use_adapter", True),
            patience=_get(block, "patience", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"trainer: {exc}") from exc
    model, trainlog = train_scorer(records, config)
    doc = model.to_json_dict()
    doc["trained_prefix_length"] = header.get("prefix_length")
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("scorer.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    exp.path("training_log.csv").write_text(trainlog.to_csv())
    final = trainlog.rows[-1]
    return (
        f"train ok epochs={len(trainlog.rows)} train_loss={final[1]:.6f} "
        f"val_loss={final[2]:.6f} out={exp.path('scorer.json')}"
    )


def _load_scorer(exp: Experiment, prefix_length: int) -> ScorerModel:
    raw = json.loads(exp.need("scorer.json", "train").read_text())
    trained_at = raw.get("trained_prefix_length")
    if trained_at is not None and trained_at != prefix_length:
        log.warning(
            "scorer was trained at prefix length %s but the run checks at %s; "
            "behavior off the training length is uncharted",
            trained_at, prefix_length,
        )
    return ScorerModel.from_json_dict(raw)


def cmd_run(exp: Experiment) -> str:
    queries = exp.load_queries()
    backend = exp.backend()
    spec, n, prefix_length = exp.run_spec()
    if spec is None:
        result = run_no_pruning(queries, n, backend, prefix_length, jobs=exp.jobs)
        spec_dict = {"generator": "none", "launch_count": n, "prefix_length": prefix_length,
                     "seed": exp.seed}
    else:
        scorer = _load_scorer(exp, prefix_length) if spec.generator == "learned" else None
        result = run_with_pruning(queries, spec, backend, scorer_model=scorer, jobs=exp.jobs)
        spec_dict = spec.to_dict() | {"global_seed": exp.seed}
    run_dir = exp.path("run")
    persist_run(result, run_dir, spec_dict)
    m = result.metrics
    return (
        f"run ok queries={len(queries)} avg_at_m_given_k={m.avg_at_m_given_k:.4f} "
        f"cons_at_n={m.cons_at_n:.4f} tokens={result.ledger.total()} out={run_dir}"
    )


def cmd_sweep(exp: Experiment) -> str:
    queries = exp.load_queries()
    backend = exp.backend()
    block = _expect(_get(exp.cfg, "sweep", required=True), "sweep", dict)
    n_grid = _expect(_get(block, "n_grid", required=True), "sweep.n_grid", list)
    gamma_grid = _expect(_get(block, "gamma_grid", required=True), "sweep.gamma_grid", list)
    prefix_length = _expect(
        _get(block, "prefix_length", required=True), "sweep.prefix_length", int
    )
    generator = _get(block, "generator", "confidence")
    scorer = _load_scorer(exp, prefix_length) if generator == "learned" else None
    points = sweep_gamma(
        queries, backend, n_grid, gamma_grid, prefix_length, generator,
        seed=derive_seed(exp.seed, "sweep"), scorer_model=scorer, jobs=exp.jobs,
    )
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("sweep.csv").write_text(sweep_to_csv(points))
    task_tokens = float(np.mean([q.task_length_ref for q in queries]))
    optima = extract_optimal_gamma(points)
    lines = ["budget_tokens,prefix_tokens,task_tokens,inverse_gamma,gamma_star,launch_count,accuracy"]
    for o in optima:
        lines.append(
            f"{o.budget_tokens},{prefix_length},{task_tokens:.2f},"
            f"{o.inverse_gamma:.6f},{o.gamma_star:.6f},{o.launch_count},{o.accuracy:.6f}"
        )
    exp.path("optimal.csv").write_text("\n".join(lines) + "\n")
    return f"sweep ok points={len(points)} buckets={len(optima)} out={exp.path('sweep.csv')}"


def _read_observations(paths: list[Path]) -> list[tuple]:
    obs = []
    for p in paths:
        rows = p.read_text().strip().splitlines()
        header = rows[0].split(",")
        idx = {name: header.index(name) for name in
               ("budget_tokens", "prefix_tokens", "task_tokens", "inverse_gamma")}
        for line in rows[1:]:
            cells = line.split(",")
            obs.append(tuple(float(cells[idx[n]]) for n in
                             ("budget_tokens", "prefix_tokens", "task_tokens", "inverse_gamma")))
    return obs


def cmd_fit_law(exp: Experiment) -> str:
    inputs = _get(exp.cfg, "scaling.fit_inputs", ["optimal.csv"])
    paths = []
    for name in inputs:
        p = Path(name)
        if not p.is_absolute():
            p = exp.path(name)
        if not p.exists():
            raise DependencyError(f"missing {p}; run `pathprune sweep` first")
        paths.append(p)
    coeffs = fit_powerlaw(_read_observations(paths))
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("coefficients.json").write_text(coefficients_to_json(coeffs))
    return (
        f"fit-law ok a={coeffs.a:.6g} b={coeffs.b:.4f} c={coeffs.c:.4f} d={coeffs.d:.4f} "
        f"rmse={coeffs.log_rmse:.4f} n={coeffs.n_points} out={exp.path('coefficients.json')}"
    )


def _resolve_coefficients(exp: Experiment) -> ScalingCoefficients:
    spec = _get(exp.cfg, "scaling.coefficients", "paper")
    if spec == "paper":
        return PAPER_COEFFICIENTS
    if isinstance(spec, dict):
        try:
            return ScalingCoefficients(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scaling.coefficients: {exc}") from exc
    p = Path(spec)
    if not p.is_absolute():
        p = exp.path(spec)
    if not p.exists():
        raise DependencyError(f"missing {p}; run `pathprune fit-law` first")
    return coefficients_from_json(p.read_text())


def cmd_tables(exp: Experiment) -> str:
    coeffs = _resolve_coefficients(exp)
    specs = _get(exp.cfg, "scaling.tables", required=True)
    _expect(specs, "scaling.tables", list, lambda v: len(v) > 0, "must be a nonempty list")
    tables_dir = exp.path("tables")
    tables_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, block in enumerate(specs):
        prefix = f"scaling.tables[{i}]"
        name = _get(block, "name", f"table{i}")
        table = emit_lookup_tables(
            coeffs,
            task_tokens=_expect(_get(block, "task_tokens", required=True),
                                f"{prefix}.task_tokens", (int, float)),
            prefix_grid=_expect(_get(block, "prefix_grid", required=True),
                                f"{prefix}.prefix_grid", list),
            budget_grid=_expect(_get(block, "budget_grid", required=True),
                                f"{prefix}.budget_grid", list),
        )
        (tables_dir / f"{name}.csv").write_text(table.to_csv())
        (tables_dir / f"{name}.txt").write_text(table.to_text())
        names.append(name)
    return f"tables ok emitted={','.join(names)} out={tables_dir}"


def cmd_report(exp: Experiment) -> str:
    runs = _get(exp.cfg, "report.runs", required=True)
    _expect(runs, "report.runs", list, lambda v: len(v) > 0, "must be a nonempty list")
    baseline_name = _get(exp.cfg, "report.baseline")
    rows = []
    for i, entry in enumerate(runs):
        prefix = f"report.runs[{i}]"
        name = _expect(_get(entry, "name", required=True), f"{prefix}.name", str)
        run_dir = Path(_expect(_get(entry, "dir", required=True), f"{prefix}.dir", str))
        if not run_dir.is_absolute():
            run_dir = exp.path(str(run_dir))
        metrics_file = run_dir / "metrics.csv"
        ledger_file = run_dir / "ledger.json"
        if not metrics_file.exists():
            raise DependencyError(f"missing {metrics_file}; run `pathprune run` first")
        header, row = metrics_file.read_text().strip().splitlines()
        metrics = dict(zip(header.split(","), row.split(",")))
        ledger = json.loads(ledger_file.read_text()) if ledger_file.exists() else {}
        rows.append({
            "name": name,
            "dataset": _get(entry, "dataset", "default"),
            "avg_at_m_given_k": float(metrics["avg_at_m_given_k"]),
            "cons_at_n": float(metrics["cons_at_n"]),
            "tokens": int(ledger.get("total_tokens", 0)),
        })

    datasets = sorted({r["dataset"] for r in rows})
    lines = ["# Run comparison", ""]
    for ds in datasets:
        group = [r for r in rows if r["dataset"] == ds]
        base = next((r for r in group if r["name"] == baseline_name), None)
        lines.append(f"## {ds}")
        lines.append("")
        lines.append("| method | avg@m&#124;k | cons@n | tokens | token reduction |")
        lines.append("| --- | --- | --- | --- | --- |")
        for r in group:
            if base is not None and base["tokens"] > 0 and r is not base:
                delta = (base["tokens"] - r["tokens"]) / base["tokens"] * 100.0
                red = f"{delta:.2f}%"
            elif r is base:
                red = "baseline"
            else:
                red = "-"
            lines.append(
                f"| {r['name']} | {r['avg_at_m_given_k']:.4f} | {r['cons_at_n']:.4f} "
                f"| {r['tokens']} | {red} |"
            )
        lines.append("")
    exp.out.mkdir(parents=True, exist_ok=True)
    exp.path("report.md").write_text("\n".join(lines))
    return f"report ok runs={len(rows)} out={exp.path('report.md')}"


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "simulate": cmd_simulate,
    "label": cmd_label,
    "train": cmd_train,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "fit-law": cmd_fit_law,
    "tables": cmd_tables,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathprune",
        description="Parallel reasoning with early path pruning.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--jobs", type=int, default=1, help="worker pool size")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise DependencyError(f"missing config file {cfg_path}")
        try:
            cfg = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: not valid JSON ({exc})") from exc
        cfg = apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out_dir = Path(args.out) if args.out else Path(_get(cfg, "output_dir", "runs"))
        exp = Experiment(cfg, out_dir, jobs=max(1, args.jobs))
        print(_COMMANDS[args.command](exp))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except PathPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
