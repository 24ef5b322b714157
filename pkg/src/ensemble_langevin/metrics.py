"""Convergence diagnostics and cost accounting.

Contains the debiased entropic transport divergence between discrete
measures, the two error random variables built from it (ensemble-vs-posterior
and posterior-vs-posterior), the scalar distribution distance used to compare
those two error populations, history-based enrichment trigger heuristics, and
the closed-form forward-call count for an enrichment plan.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import STREAM_PP, DiscreteMeasure, NotReady, SeedSpec
from .enrichment import EnrichmentPlan


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic regularization strength and fixed-point iteration limits.

    The ground cost is always c(x, y) = 0.5 |x - y|^2.
    """

    epsilon: float = 0.1
    max_iters: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError("invalid Sinkhorn configuration")


def _cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def entropic_cost(mu: DiscreteMeasure, nu: DiscreteMeasure,
                  cfg: SinkhornConfig, *, init: tuple | None = None,
                  want_duals: bool = False):
    """Entropy-regularized transport cost between two discrete measures.

    When mu and nu are the same measure the symmetric damped fixed point is
    used (a single self-consistent potential), which converges orders of
    magnitude faster than alternating projections on self-transport problems.
    Otherwise, log-domain dual updates of (f, g) run until the sup-norm
    change drops below cfg.tol.  ``init`` warm-starts the duals; with
    ``want_duals`` the final (f, g) pair is appended to the return tuple.
    Returns (value, converged[, duals]); value = <f, a> + <g, b>.
    """
    x, a = mu.atoms, mu.weights
    y, b = nu.atoms, nu.weights
    eps = cfg.epsilon
    if mu is nu or (x.shape == y.shape and np.array_equal(x, y)
                    and np.array_equal(a, b)):
        val, converged, p = _self_entropic_cost(mu, cfg, init=init)
        if want_duals:
            return val, converged, (p, p.copy())
        return val, converged
    neg_C = -_cost_matrix(x, y) / eps
    log_a = np.log(a)
    log_b = np.log(b)
    if init is not None and len(init[0]) == len(a) and len(init[1]) == len(b):
        f, g = np.asarray(init[0], dtype=float), np.asarray(init[1], dtype=float)
    else:
        f = np.zeros(len(a))
        g = np.zeros(len(b))
    converged = False
    for _ in range(cfg.max_iters):
        f_new = -eps * logsumexp(neg_C + (log_b + g / eps)[None, :], axis=1)
        g_new = -eps * logsumexp(neg_C + (log_a + f_new / eps)[:, None], axis=0)
        delta = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
        f, g = f_new, g_new
        if delta < cfg.tol:
            converged = True
            break
    val = float(f @ a + g @ b)
    if want_duals:
        return val, converged, (f, g)
    return val, converged


def _self_entropic_cost(mu: DiscreteMeasure, cfg: SinkhornConfig,
                        init: tuple | None = None) -> tuple:
    """Self-transport cost via the damped symmetric dual fixed point."""
    x, a = mu.atoms, mu.weights
    eps = cfg.epsilon
    neg_C = -_cost_matrix(x, x) / eps
    log_a = np.log(a)
    if init is not None and len(init[0]) == len(a):
        p = np.asarray(init[0], dtype=float).copy()
    else:
        p = np.zeros(len(a))
    converged = False
    for _ in range(cfg.max_iters):
        p_new = 0.5 * (p - eps * logsumexp(neg_C + (log_a + p / eps)[None, :],
                                           axis=1))
        delta = np.max(np.abs(p_new - p))
        p = p_new
        if delta < cfg.tol:
            converged = True
            break
    return 2.0 * float(p @ a), converged, p


def sinkhorn_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure,
                        cfg: SinkhornConfig | None = None, *,
                        self_mu: float | None = None,
                        self_nu: float | None = None) -> float:
    """Debiased divergence: cross cost minus half of the two self costs.

    Debiasing makes identical measures give exactly zero (all three solves
    coincide); tiny negative round-off is clamped to zero.  Precomputed self
    costs may be passed in when one measure is compared against many others.
    """
    if cfg is None:
        cfg = SinkhornConfig()
    if mu is nu or (mu.atoms.shape == nu.atoms.shape
                    and np.array_equal(mu.atoms, nu.atoms)
                    and np.array_equal(mu.weights, nu.weights)):
        return 0.0
    cross, _ = entropic_cost(mu, nu, cfg)
    if self_mu is None:
        self_mu, _ = entropic_cost(mu, mu, cfg)
    if self_nu is None:
        self_nu, _ = entropic_cost(nu, nu, cfg)
    val = cross - 0.5 * (self_mu + self_nu)
    if val < 0:
        if val < -1e-9:
            # genuine negative values indicate non-convergence, keep a floor
            return 0.0
        return 0.0
    return val


def ep_t(ensemble_measure: DiscreteMeasure, posterior_samples: DiscreteMeasure,
         cfg: SinkhornConfig | None = None) -> float:
    """Divergence of the running ensemble from a fixed posterior batch."""
    return sinkhorn_divergence(ensemble_measure, posterior_samples, cfg)


PP_CACHE_HEADER = "# pp-cache v1"


def pp_baseline(sampler, b_bar: int, n_pairs: int,
                cfg: SinkhornConfig | None = None,
                seeds: SeedSpec | None = None,
                cache_path: str | None = None,
                problem_id: str = "") -> list:
    """Noise floor: divergences between independent posterior sample pairs.

    ``sampler(n, seeds)`` must return a DiscreteMeasure of n samples.  With a
    cache path, previously computed values for the same (problem_id, b_bar)
    are reused; the cache is a text table written by atomic replace.
    """
    if seeds is None:
        seeds = SeedSpec(0)
    cached = {}
    if cache_path is not None and os.path.exists(cache_path):
        cached = _read_pp_cache(cache_path, problem_id, b_bar)
    values = []
    dirty = False
    for k in range(n_pairs):
        if k in cached:
            values.append(cached[k])
            continue
        mu = sampler(b_bar, SeedSpec(seeds.master_seed, run_index=2 * k))
        nu = sampler(b_bar, SeedSpec(seeds.master_seed, run_index=2 * k + 1))
        values.append(sinkhorn_divergence(mu, nu, cfg))
        cached[k] = values[-1]
        dirty = True
    if cache_path is not None and dirty:
        _write_pp_cache(cache_path, problem_id, b_bar, cached)
    return values


def _read_pp_cache(path: str, problem_id: str, b_bar: int) -> dict:
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != PP_CACHE_HEADER:
            return {}
        for line in fh:
            parts = line.split()
            if len(parts) != 4:
                continue
            pid, bb, idx, val = parts
            if pid == problem_id and int(bb) == b_bar:
                out[int(idx)] = float(val)
    return out


def _write_pp_cache(path: str, problem_id: str, b_bar: int, values: dict):
    rows = {}
    if os.path.exists(path):
        with open(path) as fh:
            if fh.readline().rstrip("\n") == PP_CACHE_HEADER:
                for line in fh:
                    parts = line.split()
                    if len(parts) == 4:
                        rows[(parts[0], int(parts[1]), int(parts[2]))] = float(parts[3])
    for idx, val in values.items():
        rows[(problem_id, b_bar, idx)] = val
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(PP_CACHE_HEADER + "\n")
            for (pid, bb, idx), val in sorted(rows.items()):
                fh.write(f"{pid} {bb} {idx} {val!r}\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def double_sinkhorn(ep_samples, pp_samples,
                    cfg: SinkhornConfig | None = None) -> float:
    """Divergence between the scalar distributions of the two error samples."""
    ep = np.asarray(ep_samples, dtype=float).reshape(-1, 1)
    pp = np.asarray(pp_samples, dtype=float).reshape(-1, 1)
    if len(ep) == 0 or len(pp) == 0:
        raise ValueError("both sample lists must be nonempty")
    return sinkhorn_divergence(DiscreteMeasure.uniform(ep),
                               DiscreteMeasure.uniform(pp), cfg)


@dataclass(frozen=True)
class HeuristicConfig:
    """Windows and thresholds for the enrichment trigger heuristics."""

    N1: int = 5
    N2: int = 5
    tol: float = 0.5
    ref: float = 1.0
    check_every: int = 5

    def __post_init__(self):
        if self.N1 < 1 or self.N2 < 1:
            raise ValueError("window sizes must be positive")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if self.ref <= 0 or self.check_every < 1:
            raise ValueError("invalid heuristic configuration")

    @property
    def N(self) -> int:
        return self.N1 + self.N2


def diff_heuristic(history, cfg: HeuristicConfig,
                   last_value: float | None = None,
                   sinkhorn_cfg: SinkhornConfig | None = None) -> tuple:
    """Gap between early-window and late-window distances to the newest state.

    history holds N = N1 + N2 measures at consecutive recorded times, newest
    last (the newest is the anchor, so its own term is zero).  The trigger
    fires when the gap falls below tol times its value at the previous
    trigger (cfg.ref before any trigger), signalling a plateau.
    """
    n = cfg.N
    if len(history) < n:
        raise NotReady(f"need {n} snapshots, have {len(history)}")
    window = history[-n:]
    anchor = window[-1]
    dists = [sinkhorn_divergence(m, anchor, sinkhorn_cfg) for m in window]
    value = abs(np.mean(dists[:cfg.N1]) - np.mean(dists[cfg.N1:]))
    reference = cfg.ref if last_value is None else abs(last_value)
    return value, bool(value < cfg.tol * reference)


def slope_heuristic(history, cfg: HeuristicConfig, dt: float,
                    last_value: float | None = None,
                    sinkhorn_cfg: SinkhornConfig | None = None) -> tuple:
    """Discrete slope of the distance-to-newest-state curve.

    Telescoping leaves only the endpoints: (S(m_{N-1}, anchor) - S(m_1,
    anchor)) / ((N-2) dt), with the anchor the newest measure.  The value is
    near zero on a plateau and strongly negative while still converging; the
    trigger fires when it exceeds -tol times the magnitude at the previous
    trigger (-cfg.ref before any trigger).
    """
    n = cfg.N
    if len(history) < max(n, 3):
        raise NotReady(f"need {max(n, 3)} snapshots, have {len(history)}")
    window = history[-n:]
    anchor = window[-1]
    first = sinkhorn_divergence(window[0], anchor, sinkhorn_cfg)
    second_last = sinkhorn_divergence(window[-2], anchor, sinkhorn_cfg)
    value = (second_last - first) / ((n - 2) * dt)
    reference = cfg.ref if last_value is None else abs(last_value)
    return value, bool(value > -cfg.tol * reference)


def fc_accounting(plan: EnrichmentPlan, dt: float, t: float,
                  schedule=None) -> tuple:
    """Closed-form (forward_calls, free_calls) of a run up to time t.

    Each step charges the batch size in force at its start; events at time
    t_l take effect from step round(t_l / dt) onward (enrichment applies
    before the step).  With a homotopy schedule, steps whose s-value is zero
    are moved to the free counter (the auxiliary potential alone is used).
    Event-intrinsic costs (forward slicing) are not included here; they are
    charged by the scheme itself.
    """
    n_steps = int(np.floor(t / dt + 1e-9))
    event_steps = [int(round(tl / dt)) for tl, _, _ in plan.events]
    sizes = plan.cumulative_batches()
    fc = 0
    free = 0
    for k in range(n_steps):
        stage = 0
        for j, es in enumerate(event_steps):
            if k >= es:
                stage = j + 1
        batch = sizes[stage]
        s = 1.0 if schedule is None else schedule.value(k * dt)
        if s == 0.0:
            free += batch
        else:
            fc += batch
    return fc, free
