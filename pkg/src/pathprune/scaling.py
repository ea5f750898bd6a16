"""Retention-ratio power law.

The optimal inverse retention ratio follows

    gamma^-1 = a * C^b * Lp^c / Lt^d

with the compute budget C, prefix length Lp and reference task length Lt all
normalized to units of 1024 tokens. Fitting happens in log space, where the
model is exactly linear, so ordinary least squares recovers the coefficients
deterministically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CollinearityError

TOKEN_UNIT = 1024.0

_REGRESSOR_NAMES = ("budget", "prefix_length", "task_length")


@dataclass(frozen=True)
class ScalingCoefficients:
    """(a, b, c, d) plus fit diagnostics, present only for fitted coefficients."""

    a: float
    b: float
    c: float
    d: float
    log_rmse: float | None = None
    n_points: int | None = None

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("coefficient a must be positive")
        if (self.log_rmse is None) != (self.n_points is None):
            raise ValueError("fit diagnostics must be both present or both absent")

    def to_json_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "d": self.d,
            "log_rmse": self.log_rmse,
            "n_points": self.n_points,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ScalingCoefficients":
        return cls(
            a=d["a"], b=d["b"], c=d["c"], d=d["d"],
            log_rmse=d.get("log_rmse"), n_points=d.get("n_points"),
        )


# Published coefficients of the fitted law.
PAPER_COEFFICIENTS = ScalingCoefficients(a=1.17e4, b=0.46, c=0.40, d=4.55)


@dataclass(frozen=True)
class PlanQuery:
    """A deployment planning question: budget, prefix and task length in tokens."""

    budget_tokens: float
    prefix_tokens: float
    task_tokens: float

    def __post_init__(self):
        if min(self.budget_tokens, self.prefix_tokens, self.task_tokens) <= 0:
            raise ValueError("planning inputs must be positive")


def predict_inverse_gamma(query: PlanQuery, coeffs: ScalingCoefficients) -> float:
    """Optimal inverse retention ratio for the given deployment point."""
    c_hat = query.budget_tokens / TOKEN_UNIT
    lp_hat = query.prefix_tokens / TOKEN_UNIT
    lt_hat = query.task_tokens / TOKEN_UNIT
    return float(coeffs.a * c_hat ** coeffs.b * lp_hat ** coeffs.c / lt_hat ** coeffs.d)


def gamma_for(query: PlanQuery, coeffs: ScalingCoefficients) -> float:
    """Retention ratio in (0, 1]; the law may recommend keeping everything."""
    return min(1.0, 1.0 / predict_inverse_gamma(query, coeffs))


def plan_retention(query: PlanQuery, coeffs: ScalingCoefficients, launch_count: int) -> tuple[float, int]:
    """(gamma, k) for a given launch count, k clamped into [1, N]."""
    gamma = gamma_for(query, coeffs)
    k = int(np.floor(gamma * launch_count + 0.5))
    return gamma, max(1, min(k, launch_count))


def fit_powerlaw(observations) -> ScalingCoefficients:
    """OLS in log space over (budget, prefix, task_length, inverse_gamma) rows."""
    rows = [tuple(float(v) for v in obs) for obs in observations]
    if len(rows) < 4:
        raise CollinearityError(f"need at least 4 observations to fit, got {len(rows)}")
    arr = np.array(rows, dtype=np.float64)
    if arr.shape[1] != 4:
        raise ValueError("observations must be (budget, prefix, task_length, inverse_gamma)")
    if np.any(arr <= 0):
        raise ValueError("all observation entries must be positive")

    logs = np.log(arr[:, :3] / TOKEN_UNIT)
    y = np.log(arr[:, 3])
    for col, name in enumerate(_REGRESSOR_NAMES):
        if np.ptp(logs[:, col]) < 1e-12:
            raise CollinearityError(f"regressor {name!r} has no spread; cannot identify its exponent")
    design = np.column_stack([np.ones(len(rows)), logs])
    if np.linalg.matrix_rank(design) < 4:
        raise CollinearityError("design matrix is rank deficient (collinear regressors)")

    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ coef
    rmse = float(np.sqrt(np.mean(residuals ** 2)))
    return ScalingCoefficients(
        a=float(np.exp(coef[0])),
        b=float(coef[1]),
        c=float(coef[2]),
        d=float(-coef[3]),
        log_rmse=rmse,
        n_points=len(rows),
    )


@dataclass(frozen=True)
class LookupTable:
    """Inverse retention ratios over a (prefix length x budget) grid."""

    task_tokens: float
    prefix_grid: tuple
    budget_grid: tuple
    values: np.ndarray  # (len(prefix_grid), len(budget_grid))

    def to_csv(self) -> str:
        header = "prefix_length," + ",".join(f"{int(b)}" for b in self.budget_grid)
        lines = [header]
        for lp, row in zip(self.prefix_grid, self.values):
            lines.append(f"{int(lp)}," + ",".join(f"{v:.4f}" for v in row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = 9
        head = "prefix".rjust(8) + "".join(f"{int(b):>{width}}" for b in self.budget_grid)
        lines = [f"task length ~ {int(self.task_tokens)} tokens", head]
        for lp, row in zip(self.prefix_grid, self.values):
            lines.append(f"{int(lp):>8}" + "".join(f"{v:>{width}.2f}" for v in row))
        return "\n".join(lines) + "\n"


def emit_lookup_tables(
    coeffs: ScalingCoefficients,
    task_tokens: float,
    prefix_grid,
    budget_grid,
) -> LookupTable:
    """Recommended inverse retention ratios for every grid cell."""
    prefix_grid = tuple(float(v) for v in prefix_grid)
    budget_grid = tuple(float(v) for v in budget_grid)
    if not prefix_grid or not budget_grid:
        raise ValueError("lookup grids must be nonempty")
    values = np.empty((len(prefix_grid), len(budget_grid)))
    for i, lp in enumerate(prefix_grid):
        for j, budget in enumerate(budget_grid):
            values[i, j] = predict_inverse_gamma(
                PlanQuery(budget_tokens=budget, prefix_tokens=lp, task_tokens=task_tokens), coeffs
            )
    values.setflags(write=False)
    return LookupTable(
        task_tokens=task_tokens, prefix_grid=prefix_grid, budget_grid=budget_grid, values=values
    )


@dataclass(frozen=True)
class OptimalPoint:
    """Accuracy-maximizing gamma within one budget bucket of a sweep."""

    launch_count: int
    budget_tokens: int
    gamma_star: float
    inverse_gamma: float
    accuracy: float


def extract_optimal_gamma(points, accuracy_field: str = "cons_at_n") -> list[OptimalPoint]:
    """Per launch-count bucket, the gamma with the best accuracy.

    Accuracy ties go to the larger gamma (the cheaper-risk choice, since
    retaining more paths never hurts accuracy expectations).
    """
    buckets: dict[int, list] = {}
    for p in points:
        buckets.setdefault(p.launch_count, []).append(p)
    out = []
    for n in sorted(buckets):
        best = max(buckets[n], key=lambda p: (getattr(p, accuracy_field), p.gamma))
        out.append(
            OptimalPoint(
                launch_count=n,
                budget_tokens=best.total_tokens,
                gamma_star=best.gamma,
                inverse_gamma=1.0 / best.gamma,
                accuracy=getattr(best, accuracy_field),
            )
        )
    return out


def coefficients_to_json(coeffs: ScalingCoefficients) -> str:
    return json.dumps(coeffs.to_json_dict(), sort_keys=True, indent=1) + "\n"


def coefficients_from_json(text: str) -> ScalingCoefficients:
    return ScalingCoefficients.from_json_dict(json.loads(text))
