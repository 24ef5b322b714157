"""Interacting-particle Langevin samplers with mid-run batch enrichment,
homotopy-scheduled potentials and entropic-transport diagnostics."""

__version__ = "0.1.0"

from .core import (
    DiscreteMeasure,
    DivergedStep,
    EmptySchedule,
    Ensemble,
    EnsembleStats,
    IllPosed,
    InvalidEnsemble,
    NotReady,
    Potential,
    SeedSpec,
    SelectionTooLarge,
    SolveFailed,
    compute_stats,
    empirical_measure,
    gaussian_potential,
)
from .enrichment import (
    BackwardSlice,
    DiffusionPropagation,
    EnrichmentPlan,
    ForwardSlice,
    GaussianTransport,
    RandomKick,
    enrich,
    forward_call_cost,
)
from .homotopy import (
    HomotopyPotential,
    HomotopySchedule,
    enrichment_times_from_switch,
    schedule_value,
)
from .metrics import (
    HeuristicConfig,
    SinkhornConfig,
    diff_heuristic,
    double_sinkhorn,
    ep_t,
    fc_accounting,
    pp_baseline,
    sinkhorn_divergence,
    slope_heuristic,
)
from .problems import (
    DarcyProblem,
    GaussianMixtureProblem,
    LinearGaussianProblem,
    make_problem,
    stretch_move_sampler,
)
from .propagators import PropagatorKind, propagate, step
from .runner import AdaptivePlan, RunConfig, RunRecord, run, run_many
