"""Batch enrichment: grow an ensemble from b to b+a particles mid-run.

Every scheme satisfies the same contract: the output has exactly b+a
particles, the first b of which are the input particles bit-for-bit, and the
a appended particles are produced from the recorded history plus an
enrichment-specific noise stream that is keyed independently of the
propagation noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    STREAM_ENRICHMENT,
    Ensemble,
    Potential,
    SeedSpec,
    SelectionTooLarge,
    compute_stats,
)
from .propagators import PropagatorKind, propagate


@dataclass(frozen=True)
class ForwardSlice:
    """Propagate the whole batch delta_steps ahead, recruit a particles there.

    The only scheme that spends forward calls: the interacting drift needs
    gradients for every particle, so the cost is b * delta_steps calls.
    """

    delta_steps: int = 1


@dataclass(frozen=True)
class BackwardSlice:
    """Recruit a particles from the snapshot delta_steps in the past. Free."""

    delta_steps: int = 1


@dataclass(frozen=True)
class DiffusionPropagation:
    """Duplicate selected particles and perturb with the diffusion term only.

    New particles stay in the range of the current covariance, so the rank of
    the ensemble covariance is preserved.  delta_steps stretches the
    effective diffusion step to delta_steps * dt, which lets stacked events
    at the same time spread their sub-batches over several diffusion scales.
    """

    delta_steps: int = 1


@dataclass(frozen=True)
class RandomKick:
    """Duplicate selected particles and add an isotropic Gaussian kick.

    The kick variance is dt * (trace(C)/D + 1e-8) per coordinate, so it
    adapts to the ensemble spread and restores full covariance rank.
    """


@dataclass(frozen=True)
class GaussianTransport:
    """Sample a fresh particles from N(mean, C + jitter*I) (moment matching).

    jitter defaults to 1e-8 * trace(C)/D, which keeps the sampler well posed
    when b <= D makes C singular.
    """

    jitter: float | None = None


EnrichmentScheme = (
    ForwardSlice | BackwardSlice | DiffusionPropagation | RandomKick | GaussianTransport
)


@dataclass(frozen=True)
class EnrichmentPlan:
    """Ordered enrichment events for one run.

    events: list of (time, added batch size, scheme); times must be strictly
    increasing multiples of dt (checked by the runner when it snaps them to
    the step grid).
    """

    b0: int
    events: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.b0 < 1:
            raise ValueError("initial batch size must be positive")
        evs = tuple(self.events)
        times = [t for t, _, _ in evs]
        # ties are allowed: several events at the same time are applied in
        # listed order (stacked enrichment)
        if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
            raise ValueError("event times must be nondecreasing")
        if any(b < 1 for _, b, _ in evs):
            raise ValueError("added batch sizes must be positive")
        object.__setattr__(self, "events", evs)

    @property
    def total_batch(self) -> int:
        return self.b0 + sum(b for _, b, _ in self.events)

    def cumulative_batches(self) -> list:
        """Batch sizes in force after each event: [b0, b0+b1, ...]."""
        sizes = [self.b0]
        for _, b, _ in self.events:
            sizes.append(sizes[-1] + b)
        return sizes


def _select(rng: np.random.Generator, b: int, a: int, *, replace_ok: bool) -> np.ndarray:
    if a <= b:
        return rng.choice(b, size=a, replace=False)
    if not replace_ok:
        raise SelectionTooLarge(f"cannot select {a} of {b} without replacement")
    return rng.choice(b, size=a, replace=True)


def enrich(history: list, scheme: EnrichmentScheme, a: int, pot: Potential,
           kind: PropagatorKind, seeds: SeedSpec, *, event_index: int = 0,
           zero_noise: bool = False) -> Ensemble:
    """Grow the current ensemble (last element of history) by a particles.

    ``history`` is a list of snapshots at consecutive recorded steps, newest
    last; BackwardSlice reaches delta_steps entries back into it.  The
    enrichment noise stream is keyed by (STREAM_ENRICHMENT, event_index), so
    it never aliases propagation noise and changing it leaves the existing
    trajectory untouched.
    """
    if not history:
        raise ValueError("history must contain at least the current ensemble")
    if a < 1:
        raise ValueError("number of added particles must be positive")
    cur = history[-1]
    b = cur.batch_size
    rng = seeds.stream(STREAM_ENRICHMENT, event_index)

    if isinstance(scheme, ForwardSlice):
        if a > b:
            raise SelectionTooLarge(f"cannot slice {a} of {b} particles")
        # noise for the slice propagation comes from the enrichment stream
        # (extra=1+event_index) so it neither reuses the run's future
        # propagation noise nor the selection draws below
        snaps = propagate(cur, pot, kind, scheme.delta_steps, seeds,
                          zero_noise=zero_noise,
                          noise_purpose=STREAM_ENRICHMENT,
                          noise_extra=1 + event_index)
        idx = _select(rng, b, a, replace_ok=False)
        new = snaps[-1].particles[idx]
    elif isinstance(scheme, BackwardSlice):
        if a > b:
            raise SelectionTooLarge(f"cannot slice {a} of {b} particles")
        if len(history) <= scheme.delta_steps:
            raise ValueError(
                f"backward slice needs {scheme.delta_steps + 1} snapshots, "
                f"history has {len(history)}"
            )
        past = history[-1 - scheme.delta_steps]
        idx = _select(rng, past.batch_size, a, replace_ok=False)
        new = past.particles[idx].copy()
    elif isinstance(scheme, DiffusionPropagation):
        stats = compute_stats(cur)
        idx = _select(rng, b, a, replace_ok=True)
        new = cur.particles[idx].copy()
        if not zero_noise:
            xi = rng.standard_normal((a, b))
            # sqrt(delta) * Gamma xi with Gamma = sqrt(2) C^{1/2}
            delta = scheme.delta_steps * kind.dt
            new = new + np.sqrt(2.0 * delta) * xi @ stats.sqrt_factor.T
    elif isinstance(scheme, RandomKick):
        stats = compute_stats(cur)
        d = cur.dim
        dt_kick = kind.dt * (np.trace(stats.covariance) / d + 1e-8)
        idx = _select(rng, b, a, replace_ok=True)
        new = cur.particles[idx].copy()
        if not zero_noise:
            new = new + np.sqrt(dt_kick) * rng.standard_normal((a, d))
    elif isinstance(scheme, GaussianTransport):
        stats = compute_stats(cur)
        d = cur.dim
        jitter = scheme.jitter
        if jitter is None:
            jitter = 1e-8 * np.trace(stats.covariance) / d
        cov = stats.covariance + jitter * np.eye(d)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(cov)
            chol = v * np.sqrt(np.clip(w, 0.0, None))
        new = stats.mean + rng.standard_normal((a, d)) @ chol.T
    else:
        raise TypeError(f"unknown enrichment scheme {scheme!r}")

    out = np.vstack([cur.particles, new])
    return Ensemble(out, t=cur.t)


def forward_call_cost(scheme: EnrichmentScheme, b: int, a: int,
                      delta_steps: int = 0) -> tuple:
    """(forward_calls, free_calls) consumed by one enrichment event."""
    if isinstance(scheme, ForwardSlice):
        steps = scheme.delta_steps if delta_steps == 0 else delta_steps
        return (b * steps, 0)
    return (0, 0)
