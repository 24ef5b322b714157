"""Core domain types: ensembles, potentials, discrete measures, seeding.

All other modules build on the types defined here.  Arrays are plain numpy
float64; an ensemble is a (B, D) matrix of particles together with a process
time stamp.  Randomness is counter-based (Philox) so that every noise draw is
addressable by (run, step, purpose) and enrichment mid-run never perturbs the
streams of pre-existing stages.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class InvalidEnsemble(ValueError):
    """Ensemble contains non-finite entries or has inconsistent shape."""


class DivergedStep(RuntimeError):
    """A propagation step produced a non-finite drift."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(message or f"drift diverged at step {step_index}")


class SelectionTooLarge(ValueError):
    """Requested more particles than available for selection without replacement."""


class EmptySchedule(ValueError):
    """A constant schedule has no interior switch times."""


class NotReady(RuntimeError):
    """Not enough history accumulated to evaluate a heuristic."""


class IllPosed(ValueError):
    """Problem data yields a singular precision / system matrix."""


class SolveFailed(RuntimeError):
    """A linear forward solve failed beyond the handled null space."""


# Stream purposes for counter-based RNG. Distinct constants guarantee that
# e.g. enrichment noise never aliases propagation noise at the same step.
STREAM_PROPAGATION = 1
STREAM_ENRICHMENT = 2
STREAM_INIT = 3
STREAM_POSTERIOR = 4
STREAM_MCMC = 5
STREAM_DATA = 6
STREAM_PP = 7


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic seeding contract.

    A stream is addressed by (run_index, step_index, purpose, extra).  Within
    a stream, particle i consumes the i-th row of the drawn block, so the
    noise of particle i at step k of run r is a pure function of
    (master_seed, r, i, k) and in particular independent of the batch size
    history (adding particles appends rows, it does not reshuffle).
    """

    master_seed: int
    run_index: int = 0

    def with_run(self, run_index: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, run_index)

    def stream(self, purpose: int, step_index: int = 0, extra: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=np.array([self.master_seed, 0], dtype=np.uint64),
            counter=np.array(
                [purpose, self.run_index, step_index, extra], dtype=np.uint64
            ),
        )
        return np.random.Generator(bitgen)


@dataclass(frozen=True)
class Ensemble:
    """B particles of dimension D at process time t."""

    particles: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.particles, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidEnsemble(f"particles must be a B x D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidEnsemble("particles contain non-finite entries")
        if self.t < 0:
            raise InvalidEnsemble("process time must be nonnegative")
        object.__setattr__(self, "particles", arr)

    @property
    def batch_size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class EnsembleStats:
    """Empirical mean, covariance (divisor B) and its non-symmetric root.

    sqrt_factor is the D x B matrix with columns (y_i - mean)/sqrt(B); it
    satisfies covariance = sqrt_factor @ sqrt_factor.T without any
    factorization work.
    """

    mean: np.ndarray
    covariance: np.ndarray
    sqrt_factor: np.ndarray


def compute_stats(e: Ensemble) -> EnsembleStats:
    """Mean, covariance and non-symmetric covariance root of an ensemble.

    The covariance uses divisor B (not B-1), matching the correction
    constant (D+1)/B used by the affine-invariant propagator.
    """
    p = e.particles
    b = e.batch_size
    mean = p.mean(axis=0)
    dev = p - mean
    sqrt_factor = dev.T / np.sqrt(b)
    cov = sqrt_factor @ sqrt_factor.T
    return EnsembleStats(mean=mean, covariance=cov, sqrt_factor=sqrt_factor)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted atoms in R^D; weights sum to one."""

    atoms: np.ndarray
    weights: np.ndarray
    quality_warning: bool = False

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("atoms and weights length mismatch")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms: np.ndarray, quality_warning: bool = False) -> "DiscreteMeasure":
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n), quality_warning)


def empirical_measure(e: Ensemble) -> DiscreteMeasure:
    """Uniformly weighted discrete measure carried by the ensemble particles."""
    return DiscreteMeasure.uniform(e.particles)


class Potential:
    """Evaluatable scalar field with gradient and instrumented call counting.

    value_fn / grad_fn act on a (B, D) batch and return shapes (B,) / (B, D).
    Every public evaluation of a batch of B points increments the forward-call
    counter by B (or the free counter if the potential is flagged free).
    A fused value+gradient evaluation counts once, which matters for
    potentials whose gradient is computed alongside the forward solve.
    """

    def __init__(self, value_fn, grad_fn, *, free: bool = False,
                 value_and_grad_fn=None, name: str = ""):
        self._value_fn = value_fn
        self._grad_fn = grad_fn
        self._value_and_grad_fn = value_and_grad_fn
        self.free = free
        self.name = name
        self.forward_calls = 0
        self.free_calls = 0
        self._lock = threading.Lock()

    # -- counting ---------------------------------------------------------
    def _count(self, n: int):
        with self._lock:
            if self.free:
                self.free_calls += n
            else:
                self.forward_calls += n

    def reset_counters(self):
        with self._lock:
            self.forward_calls = 0
            self.free_calls = 0

    # -- uncounted raw access (used by blends and tests) ------------------
    def raw_value(self, Y: np.ndarray) -> np.ndarray:
        return np.asarray(self._value_fn(np.atleast_2d(Y)))

    def raw_grad(self, Y: np.ndarray) -> np.ndarray:
        return np.asarray(self._grad_fn(np.atleast_2d(Y)))

    def raw_value_and_grad(self, Y: np.ndarray):
        Y = np.atleast_2d(Y)
        if self._value_and_grad_fn is not None:
            v, g = self._value_and_grad_fn(Y)
            return np.asarray(v), np.asarray(g)
        return self.raw_value(Y), self.raw_grad(Y)

    # -- counted evaluation ----------------------------------------------
    def value_batch(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(Y)
        self._count(Y.shape[0])
        return self.raw_value(Y)

    def grad_batch(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(Y)
        self._count(Y.shape[0])
        return self.raw_grad(Y)

    def value_and_grad_batch(self, Y: np.ndarray):
        Y = np.atleast_2d(Y)
        self._count(Y.shape[0])
        return self.raw_value_and_grad(Y)

    def value(self, y: np.ndarray) -> float:
        return float(self.value_batch(np.atleast_2d(y))[0])

    def gradient(self, y: np.ndarray) -> np.ndarray:
        return self.grad_batch(np.atleast_2d(y))[0]


def gaussian_potential(mean: np.ndarray, cov: np.ndarray, *, free: bool = False,
                       name: str = "gaussian") -> Potential:
    """Quadratic potential of a Gaussian density (up to its normalization)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)

    def value_fn(Y):
        d = Y - mean
        return 0.5 * np.einsum("bi,ij,bj->b", d, prec, d)

    def grad_fn(Y):
        return (Y - mean) @ prec

    return Potential(value_fn, grad_fn, free=free, name=name)
