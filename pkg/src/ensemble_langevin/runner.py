"""Run orchestration: propagate, enrich, blend, account, diagnose.

A run starts from an initial batch drawn from the problem's initial density,
propagates it with the configured stepper, and grows the batch at the planned
(or heuristically triggered) enrichment events.  With a homotopy schedule the
potential is the blend of an auxiliary Gaussian and the target, with the
blend weight re-pinned from the schedule at the start of every step.
Diagnostics (divergence to a fixed posterior sample batch) are computed after
the fact from recorded snapshots and never consume forward calls.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DiscreteMeasure,
    DivergedStep,
    Ensemble,
    NotReady,
    SeedSpec,
    empirical_measure,
    gaussian_potential,
)
from .enrichment import EnrichmentPlan, enrich
from .homotopy import HomotopyPotential, HomotopySchedule
from .metrics import (
    HeuristicConfig,
    SinkhornConfig,
    diff_heuristic,
    entropic_cost,
    sinkhorn_divergence,
    slope_heuristic,
)
from .problems import make_problem
from .propagators import PropagatorKind, step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptivePlan:
    """Enrichment events triggered by a plateau heuristic instead of a clock.

    batch_sizes fixes the size of each event up front; only the trigger times
    are adaptive.  kind selects the window-gap ("diff") or slope ("slope")
    heuristic.
    """

    b0: int
    batch_sizes: tuple
    scheme: object
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    kind: str = "diff"

    def __post_init__(self):
        if self.kind not in ("diff", "slope"):
            raise ValueError("heuristic kind must be 'diff' or 'slope'")
        object.__setattr__(self, "batch_sizes", tuple(self.batch_sizes))

    @property
    def total_batch(self) -> int:
        return self.b0 + sum(self.batch_sizes)


@dataclass(frozen=True)
class RunConfig:
    problem_id: str
    propagator: PropagatorKind
    plan: object  # EnrichmentPlan or AdaptivePlan
    n_iter: int
    schedule: HomotopySchedule | None = None
    aux_cov_scale: float = 8.0
    record_every: int = 1
    ep_every: int = 5
    posterior_samples: int | None = None
    # diagnostics-grade tolerance: the divergence VALUE stabilizes orders of
    # magnitude before the duals do, and run-level decisions only compare
    # values at the percent level
    sinkhorn: SinkhornConfig = field(
        default_factory=lambda: SinkhornConfig(tol=1e-3, max_iters=2000))
    seed: int = 0
    n_runs: int = 1

    def __post_init__(self):
        if self.n_iter < 1 or self.record_every < 1 or self.ep_every < 1:
            raise ValueError("iteration counts must be positive")
        if isinstance(self.plan, EnrichmentPlan):
            dt = self.propagator.dt
            horizon = self.n_iter * dt
            for t_l, _, _ in self.plan.events:
                k = round(t_l / dt)
                if abs(t_l - k * dt) > 1e-9 * max(1.0, abs(t_l)):
                    raise ValueError(f"event time {t_l} is not a multiple of dt")
                if not 0 < t_l < horizon:
                    raise ValueError(f"event time {t_l} outside (0, {horizon})")


@dataclass
class RunRecord:
    """Everything observable about one run."""

    config: RunConfig
    run_index: int
    snapshots: list = field(default_factory=list)  # (step, Ensemble)
    s_series: list = field(default_factory=list)  # (t, s)
    fc_series: list = field(default_factory=list)  # (t, forward, free)
    enrichment_events: list = field(default_factory=list)  # (t, added)
    ep_series: list = field(default_factory=list)  # (t, EP)
    final_measure: DiscreteMeasure | None = None
    diverged: bool = False
    diverged_step: int | None = None
    unspent_enrichments: int = 0

    def batch_series(self) -> list:
        return [(s, e.batch_size) for s, e in self.snapshots]


def _build_potential(cfg: RunConfig, problem):
    target = problem.potential()
    if cfg.schedule is None:
        return target, None
    aux = gaussian_potential(np.zeros(problem.dim),
                             cfg.aux_cov_scale * np.eye(problem.dim),
                             free=True, name="aux")
    return HomotopyPotential(aux, target), target


def run(cfg: RunConfig, run_index: int = 0,
        posterior_measure: DiscreteMeasure | None = None,
        compute_ep: bool = True) -> RunRecord:
    """Execute one run.

    With the default arguments the posterior reference batch is drawn from
    the problem's reference sampler using this run's seed, so distinct runs
    get independent reference batches.
    """
    problem = make_problem(cfg.problem_id)
    seeds = SeedSpec(cfg.seed, run_index)
    pot, _ = _build_potential(cfg, problem)
    dt = cfg.propagator.dt
    rec = RunRecord(config=cfg, run_index=run_index)

    adaptive = isinstance(cfg.plan, AdaptivePlan)
    if adaptive:
        b0 = cfg.plan.b0
        pending = list(cfg.plan.batch_sizes)
        hcfg = cfg.plan.heuristic
        last_value: float | None = None
        measure_history: list = []
        event_steps: dict = {}
    else:
        b0 = cfg.plan.b0
        event_steps = {}
        for t_l, b_l, scheme in cfg.plan.events:
            event_steps.setdefault(int(round(t_l / dt)), []).append((b_l, scheme))

    e = problem.initial_ensemble(b0, seeds)
    rec.snapshots.append((0, e))
    rec.fc_series.append((0.0, pot.forward_calls, pot.free_calls))
    history = [e]  # step-resolution snapshots for slicing schemes
    if adaptive:
        measure_history.append(empirical_measure(e))
    event_count = 0

    try:
        for k in range(cfg.n_iter):
            t = k * dt
            # enrichment first, then the step (the new step's drift already
            # sees the enlarged batch)
            if adaptive:
                if (pending and k > 0 and k % hcfg.check_every == 0
                        and len(measure_history) >= hcfg.N):
                    try:
                        if cfg.plan.kind == "diff":
                            value, trigger = diff_heuristic(
                                measure_history, hcfg, last_value, cfg.sinkhorn)
                        else:
                            value, trigger = slope_heuristic(
                                measure_history, hcfg, dt, last_value, cfg.sinkhorn)
                    except NotReady:
                        trigger = False
                    if trigger:
                        a = pending.pop(0)
                        event_count += 1
                        e = enrich(history, cfg.plan.scheme, a, pot,
                                   cfg.propagator, seeds, event_index=event_count)
                        history[-1] = e
                        measure_history.clear()
                        measure_history.append(empirical_measure(e))
                        last_value = value
                        rec.enrichment_events.append((t, a))
            else:
                for b_l, scheme in event_steps.get(k, ()):
                    event_count += 1
                    e = enrich(history, scheme, b_l, pot, cfg.propagator,
                               seeds, event_index=event_count)
                    history[-1] = e
                    rec.enrichment_events.append((t, b_l))

            if cfg.schedule is not None:
                s = cfg.schedule.value(t)
                pot.s = s
            else:
                s = 1.0
            e = step(e, pot, cfg.propagator, seeds, step_index=k)
            history.append(e)
            if len(history) > 64:
                del history[0]
            if adaptive:
                measure_history.append(empirical_measure(e))
                if len(measure_history) > hcfg.N:
                    del measure_history[0]
            if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.n_iter:
                rec.snapshots.append((k + 1, e))
                rec.s_series.append((t, s))
                rec.fc_series.append(((k + 1) * dt, pot.forward_calls,
                                      pot.free_calls))
    except DivergedStep as exc:
        rec.diverged = True
        rec.diverged_step = exc.step_index
        log.warning("run %d diverged at step %d", run_index, exc.step_index)

    if adaptive:
        rec.unspent_enrichments = len(pending)
        if pending:
            log.info("run %d ended with %d unspent enrichments",
                     run_index, len(pending))

    rec.final_measure = empirical_measure(e)

    if compute_ep and not rec.diverged:
        if posterior_measure is None:
            n_post = cfg.posterior_samples or cfg.plan.total_batch
            posterior_measure = problem.reference_sampler(n_post, seeds)
        self_post, _ = entropic_cost(posterior_measure, posterior_measure,
                                     cfg.sinkhorn)
        duals = None  # warm start across snapshot times
        for idx, (s_idx, snap) in enumerate(rec.snapshots):
            if idx % cfg.ep_every and s_idx != rec.snapshots[-1][0]:
                continue
            m = empirical_measure(snap)
            cross, _, duals = entropic_cost(m, posterior_measure, cfg.sinkhorn,
                                            init=duals, want_duals=True)
            self_m, _ = entropic_cost(m, m, cfg.sinkhorn)
            val = cross - 0.5 * (self_m + self_post)
            rec.ep_series.append((s_idx * dt, max(val, 0.0)))
    return rec


def _run_one(args):
    cfg, run_index, posterior = args
    return run(cfg, run_index, posterior_measure=posterior)


@dataclass
class AggregateReport:
    """Per-time-grid summary over an ensemble of runs."""

    times: np.ndarray
    steps: np.ndarray
    mean_ep: np.ndarray
    std_ep: np.ndarray
    fc: np.ndarray
    free_fc: np.ndarray
    batch_size: np.ndarray
    s: np.ndarray
    pp_values: list
    double_sinkhorn: np.ndarray
    n_failed: int = 0


def run_many(cfg: RunConfig, R: int | None = None, workers: int = 1,
             pp_values: list | None = None) -> tuple:
    """R independent runs plus an aggregate report on the common time grid.

    All runs are scored against one shared posterior reference batch.
    Failed (diverged) runs are kept in the returned list but excluded from
    the aggregates.  pp_values, if given, is the posterior-vs-posterior
    noise-floor sample used for the double-divergence series.
    """
    if R is None:
        R = cfg.n_runs
    if R < 1:
        raise ValueError("need at least one run")
    # one fixed posterior reference batch shared by every run: the error
    # series then differ only through the runs themselves, not through
    # independent reference draws (run index R is never used by a run)
    problem = make_problem(cfg.problem_id)
    n_post = cfg.posterior_samples or cfg.plan.total_batch
    posterior = problem.reference_sampler(n_post, SeedSpec(cfg.seed, R))
    jobs = [(cfg, r, posterior) for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]

    good = [r for r in records if not r.diverged]
    if not good:
        raise RuntimeError("all runs diverged")
    ep_times = np.array([t for t, _ in good[0].ep_series])
    ep_matrix = np.array([[v for _, v in r.ep_series] for r in good])
    mean_ep = ep_matrix.mean(axis=0)
    std_ep = ep_matrix.std(axis=0)

    dt = cfg.propagator.dt
    steps = np.array([int(round(t / dt)) for t in ep_times])
    fc_map = {round(t / dt): (f, fr) for t, f, fr in good[0].fc_series}
    fc = np.array([fc_map.get(s_i, (0, 0))[0] for s_i in steps])
    free_fc = np.array([fc_map.get(s_i, (0, 0))[1] for s_i in steps])
    batch_map = dict(good[0].batch_series())
    batch = np.array([batch_map.get(s_i, 0) for s_i in steps])
    if cfg.schedule is not None:
        svals = np.array([cfg.schedule.value(max(s_i - 1, 0) * dt) for s_i in steps])
    else:
        svals = np.ones(len(steps))

    if pp_values:
        ds = np.array([
            _double(ep_matrix[:, j], pp_values, cfg.sinkhorn)
            for j in range(ep_matrix.shape[1])
        ])
    else:
        ds = np.full(len(ep_times), np.nan)
        pp_values = []

    report = AggregateReport(
        times=ep_times, steps=steps, mean_ep=mean_ep, std_ep=std_ep,
        fc=fc, free_fc=free_fc, batch_size=batch, s=svals,
        pp_values=list(pp_values), double_sinkhorn=ds,
        n_failed=len(records) - len(good))
    return records, report


def _double(ep_col, pp_values, scfg):
    from .metrics import double_sinkhorn

    return double_sinkhorn(list(ep_col), pp_values, scfg)
