"""Budget-aware parallel reasoning with early path pruning.

Launch N candidate trajectories, score their prefixes at a fixed checkpoint,
resume only the top-k, aggregate by consensus, and plan the retention ratio
with a fitted power law.
"""

from .core import (
    COMPLETED,
    LAUNCHED,
    PRUNED,
    BudgetLedger,
    MetricsReport,
    PathRecord,
    QueryRecord,
    RetentionPolicy,
    avg_at_k,
    cons_at_n,
    majority_vote,
    token_reduction,
)
from .errors import (
    BackendError,
    CapabilityError,
    CollinearityError,
    ConfigError,
    DependencyError,
    EmptyDatasetError,
    EndpointError,
    LifecycleError,
    PathPruneError,
    TruncationError,
)
from .labeler import LabeledPrefix, build_dataset, mc_label, stratify_queries
from .llm_client import EndpointConfig, HttpBackend
from .pipeline import RunResult, RunSpec, run_no_pruning, run_with_pruning, sweep_gamma
from .scaling import (
    PAPER_COEFFICIENTS,
    PlanQuery,
    ScalingCoefficients,
    emit_lookup_tables,
    fit_powerlaw,
    gamma_for,
    predict_inverse_gamma,
)
from .signals import (
    ScorerModel,
    SignalScore,
    score_confidence,
    score_heuristic,
    score_judge,
    score_learned,
)
from .simbackend import LatentPath, SimBackend, SimConfig
from .trainer import TrainConfig, soft_bce_loss, train_scorer

__version__ = "0.1.0"
