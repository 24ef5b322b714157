"""Euler-Maruyama steppers for interacting-particle Langevin dynamics.

Four dynamics families are supported:

* ``overdamped``        dy = -grad Phi dt + sqrt(2) dW
* ``scaled``            dy = -C0 grad Phi dt + sqrt(2) C0^{1/2} dW, fixed SPD C0
* ``eks``               dy = -C(Y) grad Phi dt + sqrt(2) C(Y)^{1/2} dW
* ``aldi``              eks plus the finite-ensemble correction
                        ((D+1)/B)(y - mean) dt

For ``eks``/``aldi`` the diffusion uses the non-symmetric covariance root
(D x B), so each particle carries B-dimensional noise; this reproduces the
exact affine equivariance of the discrete update.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    STREAM_PROPAGATION,
    DivergedStep,
    Ensemble,
    Potential,
    SeedSpec,
    compute_stats,
)

log = logging.getLogger(__name__)

_VARIANTS = ("overdamped", "scaled", "eks", "aldi")


@dataclass(frozen=True)
class PropagatorKind:
    variant: str
    dt: float
    scale_matrix: np.ndarray | None = None
    scale_root: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.variant == "scaled":
            c0 = np.asarray(self.scale_matrix, dtype=float)
            w, v = np.linalg.eigh(c0)
            if w.min() <= 0:
                raise ValueError("scale matrix must be symmetric positive definite")
            # symmetric PSD root, computed once since C0 is time-homogeneous
            object.__setattr__(self, "scale_matrix", c0)
            object.__setattr__(self, "scale_root", (v * np.sqrt(w)) @ v.T)

    @classmethod
    def overdamped(cls, dt: float) -> "PropagatorKind":
        return cls("overdamped", dt)

    @classmethod
    def scaled(cls, dt: float, c0: np.ndarray) -> "PropagatorKind":
        return cls("scaled", dt, scale_matrix=np.asarray(c0, dtype=float))

    @classmethod
    def eks(cls, dt: float) -> "PropagatorKind":
        return cls("eks", dt)

    @classmethod
    def aldi(cls, dt: float) -> "PropagatorKind":
        return cls("aldi", dt)

    @property
    def uses_ensemble_covariance(self) -> bool:
        return self.variant in ("eks", "aldi")


def _drift_and_diffusion(e: Ensemble, pot: Potential, kind: PropagatorKind):
    """Drift (B, D) and a function mapping noise -> diffusion increment."""
    p = e.particles
    b, d = p.shape
    grad = pot.grad_batch(p)
    if kind.variant == "overdamped":
        drift = -grad
        return drift, d, lambda xi: xi
    if kind.variant == "scaled":
        drift = -grad @ kind.scale_matrix
        return drift, d, lambda xi: xi @ kind.scale_root.T
    stats = compute_stats(e)
    drift = -grad @ stats.covariance
    if kind.variant == "aldi":
        drift = drift + ((d + 1) / b) * (p - stats.mean)
    # noise is B-dimensional per particle, mapped through the D x B root
    return drift, b, lambda xi: xi @ stats.sqrt_factor.T


def step(e: Ensemble, pot: Potential, kind: PropagatorKind, seeds: SeedSpec,
         *, step_index: int | None = None, zero_noise: bool = False,
         noise_purpose: int = STREAM_PROPAGATION,
         noise_extra: int = 0) -> Ensemble:
    """One Euler-Maruyama step; consumes one gradient evaluation per particle.

    ``zero_noise`` suppresses the diffusion term (test hook for deterministic
    drift verification).
    """
    if kind.uses_ensemble_covariance and e.batch_size < 2:
        raise ValueError(f"{kind.variant} requires at least 2 particles")
    if kind.uses_ensemble_covariance and e.batch_size <= e.dim + 1:
        warnings.warn(
            f"batch size {e.batch_size} <= D+1 = {e.dim + 1}: ergodicity of the "
            "interacting dynamics is not guaranteed",
            RuntimeWarning,
            stacklevel=2,
        )
    if step_index is None:
        step_index = int(round(e.t / kind.dt))
    drift, noise_dim, apply_root = _drift_and_diffusion(e, pot, kind)
    if not np.all(np.isfinite(drift)):
        raise DivergedStep(step_index)
    new = e.particles + kind.dt * drift
    if not zero_noise:
        rng = seeds.stream(noise_purpose, step_index, noise_extra)
        xi = rng.standard_normal((e.batch_size, noise_dim))
        new = new + np.sqrt(2.0 * kind.dt) * apply_root(xi)
    if not np.all(np.isfinite(new)):
        raise DivergedStep(step_index)
    return Ensemble(new, t=e.t + kind.dt)


def propagate(e: Ensemble, pot: Potential, kind: PropagatorKind, n_steps: int,
              seeds: SeedSpec, record_every: int | None = None,
              *, step_offset: int | None = None, zero_noise: bool = False,
              noise_purpose: int = STREAM_PROPAGATION,
              noise_extra: int = 0) -> list[Ensemble]:
    """Run ``n_steps`` steps, returning snapshots at multiples of record_every.

    The initial state and the final state are always included.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if record_every is None:
        record_every = n_steps
    if step_offset is None:
        step_offset = int(round(e.t / kind.dt))
    snapshots = [e]
    cur = e
    for k in range(n_steps):
        cur = step(cur, pot, kind, seeds, step_index=step_offset + k,
                   zero_noise=zero_noise, noise_purpose=noise_purpose,
                   noise_extra=noise_extra)
        if (k + 1) % record_every == 0 or k + 1 == n_steps:
            if snapshots[-1] is not cur:
                snapshots.append(cur)
    return snapshots
