"""Benchmark inverse problems with instrumented potentials.

Three families:

* linear-Gaussian: closed-form posterior, used for consistency and affine
  invariance checks;
* 2D Gaussian mixture with K modes on a circle: unimodal translation task
  (K=1) and multimodal mode-finding task (K=4);
* 1D elliptic PDE coefficient inversion on a periodic grid, with an adjoint
  gradient so value+gradient costs one forward solve per particle.

Each problem exposes ``potential()`` (a counted Potential), ``initial_ensemble``
and ``reference_sampler``; problems with no closed-form posterior fall back to
a stretch-move ensemble MCMC for reference samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    STREAM_DATA,
    STREAM_INIT,
    STREAM_MCMC,
    STREAM_POSTERIOR,
    DiscreteMeasure,
    Ensemble,
    IllPosed,
    Potential,
    SeedSpec,
    SolveFailed,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# linear-Gaussian


@dataclass(frozen=True)
class LinearGaussianProblem:
    """Observation = A y + noise, Gaussian prior; posterior is Gaussian."""

    A: np.ndarray
    Gamma: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    obs: np.ndarray

    def __post_init__(self):
        for name in ("A", "Gamma", "prior_mean", "prior_cov", "obs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def posterior(self) -> tuple:
        """(mean, covariance) of the Gaussian posterior."""
        gi = np.linalg.inv(self.Gamma)
        g0i = np.linalg.inv(self.prior_cov)
        prec = self.A.T @ gi @ self.A + g0i
        w = np.linalg.eigvalsh(prec)
        if w.min() <= 1e-12 * max(w.max(), 1.0):
            raise IllPosed("posterior precision is singular")
        cov = np.linalg.inv(prec)
        mean = cov @ (self.A.T @ gi @ self.obs + g0i @ self.prior_mean)
        return mean, cov

    def potential(self) -> Potential:
        mean, cov = self.posterior()
        prec = np.linalg.inv(cov)

        def value_fn(Y):
            d = Y - mean
            return 0.5 * np.einsum("bi,ij,bj->b", d, prec, d)

        def grad_fn(Y):
            return (Y - mean) @ prec

        return Potential(value_fn, grad_fn, name="linear-gaussian")

    def initial_ensemble(self, b: int, seeds: SeedSpec) -> Ensemble:
        rng = seeds.stream(STREAM_INIT)
        chol = np.linalg.cholesky(self.prior_cov)
        pts = self.prior_mean + rng.standard_normal((b, self.dim)) @ chol.T
        return Ensemble(pts)

    def reference_sampler(self, n: int, seeds: SeedSpec) -> DiscreteMeasure:
        mean, cov = self.posterior()
        rng = seeds.stream(STREAM_POSTERIOR)
        chol = np.linalg.cholesky(cov)
        return DiscreteMeasure.uniform(mean + rng.standard_normal((n, self.dim)) @ chol.T)


def linear_gaussian_posterior(p: LinearGaussianProblem) -> tuple:
    return p.posterior()


# ---------------------------------------------------------------------------
# Gaussian mixture


@dataclass(frozen=True)
class GaussianMixtureProblem:
    """Equal-weight 2D Gaussian mixture posterior with modes on a circle.

    Mode centers are radius * (cos((i-1) pi/2), sin((i-1) pi/2)), i = 1..K,
    so the first mode sits at (radius, 0) and the third at (-radius, 0); the
    initial density is a unit Gaussian at the third center's location, which
    for K=1 makes the task a translation across the domain and for K=4
    starts the ensemble right on one of the modes.
    """

    K_modes: int = 1
    radius: float = 5.0
    Sigma: np.ndarray = field(default_factory=lambda: np.eye(2))
    centers: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "Sigma", np.asarray(self.Sigma, dtype=float))
        if self.centers is None:
            i = np.arange(1, self.K_modes + 1)
            c = self.radius * np.stack(
                [np.cos((i - 1) * np.pi / 2), np.sin((i - 1) * np.pi / 2)], axis=1
            )
            object.__setattr__(self, "centers", c)
        else:
            object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float))

    @property
    def dim(self) -> int:
        return 2

    @property
    def init_center(self) -> np.ndarray:
        # location of the (possibly virtual, for K < 3) third mode
        return self.radius * np.array([np.cos(np.pi), np.sin(np.pi)])

    def potential(self) -> Potential:
        K = self.K_modes
        prec = np.linalg.inv(self.Sigma)
        log_norm = np.log(2 * np.pi * K * np.sqrt(np.linalg.det(self.Sigma)))

        def _log_weights(Y):
            d = Y[:, None, :] - self.centers[None, :, :]
            return -0.5 * np.einsum("bki,ij,bkj->bk", d, prec, d)

        def value_fn(Y):
            return log_norm - logsumexp(_log_weights(Y), axis=1)

        def grad_fn(Y):
            lw = _log_weights(Y)
            w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
            d = Y[:, None, :] - self.centers[None, :, :]
            return np.einsum("bk,bki,ij->bj", w, d, prec)

        return Potential(value_fn, grad_fn, name=f"mixture-k{K}")

    def initial_ensemble(self, b: int, seeds: SeedSpec) -> Ensemble:
        rng = seeds.stream(STREAM_INIT)
        chol = np.linalg.cholesky(self.Sigma)
        pts = self.init_center + rng.standard_normal((b, 2)) @ chol.T
        return Ensemble(pts)

    def reference_sampler(self, n: int, seeds: SeedSpec) -> DiscreteMeasure:
        rng = seeds.stream(STREAM_POSTERIOR)
        chol = np.linalg.cholesky(self.Sigma)
        which = rng.integers(self.K_modes, size=n)
        pts = self.centers[which] + rng.standard_normal((n, 2)) @ chol.T
        return DiscreteMeasure.uniform(pts)


def mixture_potential(p: GaussianMixtureProblem, x: np.ndarray) -> tuple:
    pot = p.potential()
    v, g = pot.raw_value_and_grad(np.atleast_2d(x))
    return float(v[0]), g[0]


# ---------------------------------------------------------------------------
# 1D elliptic PDE coefficient inversion


@dataclass(frozen=True)
class DarcyProblem:
    """Recover the log-permeability u of -d/dx(exp(u) dp/dx) = f on [0, 2pi).

    Finite differences on a periodic grid of D nodes with mesh h = 2pi/D.
    The flux coefficient between nodes i and i+1 is exp(u[i]).  The periodic
    system is singular along constants; it is solved on the mean-zero
    subspace (forcing projected, solution pinned to zero mean).  Observations
    are the solution at K equispaced grid nodes plus Gaussian noise of
    variance sigma_r.  The prior on u is centered Gaussian with a
    fourth-order precision that penalizes roughness and the spatial mean.
    """

    D_grid: int = 50
    K_obs: int = 10
    sigma_r: float = 1e-4
    mean_penalty: float = 100.0
    data_seed: int = 2090
    obs: np.ndarray = None

    def __post_init__(self):
        if self.D_grid % self.K_obs != 0:
            raise ValueError("observation grid must be a subset of the computational grid")
        if self.obs is None:
            object.__setattr__(self, "obs", self._generate_observations())
        else:
            object.__setattr__(self, "obs", np.asarray(self.obs, dtype=float))

    @property
    def dim(self) -> int:
        return self.D_grid

    @property
    def h(self) -> float:
        return 2 * np.pi / self.D_grid

    @property
    def grid(self) -> np.ndarray:
        """Node coordinates x_i = i h, i = 1..D."""
        return self.h * np.arange(1, self.D_grid + 1)

    @property
    def forcing(self) -> np.ndarray:
        x = self.grid
        return np.exp(-((2 * x - 2 * np.pi) ** 2) / 40.0) - 0.6

    @property
    def truth(self) -> np.ndarray:
        return 0.5 * np.sin(self.grid - self.h / 2)

    @property
    def obs_indices(self) -> np.ndarray:
        """0-based indices into the solution vector for nodes (D/K) j, j=1..K."""
        j = np.arange(1, self.K_obs + 1)
        return ((self.D_grid // self.K_obs) * j) % self.D_grid

    def prior_precision(self) -> np.ndarray:
        d, h = self.D_grid, self.h
        lap = (np.eye(d, k=1) + np.eye(d, k=-1) - 2 * np.eye(d)) / h**2
        lap[0, -1] += 1 / h**2
        lap[-1, 0] += 1 / h**2
        ones = np.ones((d, d)) / d
        m = self.mean_penalty * ones - lap
        return 4 * h * (m @ m)

    def prior_cov_factor(self) -> np.ndarray:
        """Symmetric square root of the prior covariance."""
        w, v = np.linalg.eigh(self.prior_precision())
        if w.min() <= 0:
            raise IllPosed("prior precision is not positive definite")
        return (v / np.sqrt(w)) @ v.T

    def _system_matrices(self, U: np.ndarray) -> np.ndarray:
        """Batched periodic flux-divergence matrices, shape (B, D, D)."""
        U = np.atleast_2d(U)
        b, d = U.shape
        w = np.exp(U)
        M = np.zeros((b, d, d))
        idx = np.arange(d)
        up = (idx + 1) % d
        M[:, idx, up] += w
        M[:, up, idx] += w
        M[:, idx, idx] -= w
        M[:, up, up] -= w
        return M

    def solve_batch(self, U: np.ndarray) -> np.ndarray:
        """Mean-zero pressure solutions for a batch of log-coefficients."""
        U = np.atleast_2d(U)
        b, d = U.shape
        M = self._system_matrices(U)
        f = self.forcing
        rhs = -self.h**2 * (f - f.mean())
        K = M + np.ones((d, d)) / d
        try:
            p = np.linalg.solve(K, np.broadcast_to(rhs, (b, d))[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SolveFailed(str(exc)) from exc
        return p

    def forward_batch(self, U: np.ndarray) -> np.ndarray:
        return self.solve_batch(U)[:, self.obs_indices]

    def _generate_observations(self) -> np.ndarray:
        clean = self.forward_batch(self.truth[None, :])[0]
        rng = SeedSpec(self.data_seed).stream(STREAM_DATA)
        return clean + np.sqrt(self.sigma_r) * rng.standard_normal(self.K_obs)

    def _value_and_grad(self, U: np.ndarray) -> tuple:
        U = np.atleast_2d(U)
        b, d = U.shape
        prior_prec = self.prior_precision()
        M = self._system_matrices(U)
        f = self.forcing
        rhs = -self.h**2 * (f - f.mean())
        Ksys = M + np.ones((d, d)) / d
        try:
            p = np.linalg.solve(Ksys, np.broadcast_to(rhs, (b, d))[..., None])[..., 0]
            r = p[:, self.obs_indices] - self.obs
            g = np.zeros((b, d))
            g[:, self.obs_indices] = r / self.sigma_r
            g = g - g.mean(axis=1, keepdims=True)
            lam = np.linalg.solve(Ksys, g[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SolveFailed(str(exc)) from exc
        misfit = 0.5 / self.sigma_r * np.einsum("bk,bk->b", r, r)
        prior = 0.5 * np.einsum("bi,ij,bj->b", U, prior_prec, U)
        w = np.exp(U)
        dp = np.roll(p, -1, axis=1) - p
        dl = np.roll(lam, -1, axis=1) - lam
        grad = w * dp * dl + U @ prior_prec
        return misfit + prior, grad

    def potential(self) -> Potential:
        def value_fn(Y):
            return self._value_and_grad(Y)[0]

        def grad_fn(Y):
            return self._value_and_grad(Y)[1]

        return Potential(value_fn, grad_fn, value_and_grad_fn=self._value_and_grad,
                         name=f"darcy-d{self.D_grid}")

    def initial_ensemble(self, b: int, seeds: SeedSpec) -> Ensemble:
        rng = seeds.stream(STREAM_INIT)
        factor = self.prior_cov_factor()
        return Ensemble(rng.standard_normal((b, self.dim)) @ factor.T)

    def reference_sampler(self, n: int, seeds: SeedSpec,
                          burn_in: int = 5000) -> DiscreteMeasure:
        return stretch_move_sampler(self.potential(), self.dim,
                                    self.initial_ensemble, n, seeds,
                                    burn_in=burn_in)

    def export_observations(self, path: str):
        """Write (index, x, value) rows of the observation table."""
        idx = self.obs_indices
        x = self.h * (idx + np.where(idx == 0, self.D_grid, 0))
        with open(path, "w") as fh:
            fh.write("# darcy-observations v1\n")
            for i, xi, v in zip(idx, x, self.obs):
                fh.write(f"{i} {float(xi)!r} {float(v)!r}\n")

    @classmethod
    def import_observations(cls, path: str, **kwargs) -> "DarcyProblem":
        vals = []
        with open(path) as fh:
            header = fh.readline()
            if "darcy-observations" not in header:
                raise ValueError("not an observation table")
            for line in fh:
                parts = line.split()
                if len(parts) == 3:
                    vals.append(float(parts[2]))
        return cls(obs=np.array(vals), **kwargs)


def darcy_forward(p: DarcyProblem, u: np.ndarray) -> np.ndarray:
    return p.forward_batch(np.atleast_2d(u))[0]


def darcy_potential(p: DarcyProblem, u: np.ndarray) -> tuple:
    v, g = p._value_and_grad(np.atleast_2d(u))
    return float(v[0]), g[0]


# ---------------------------------------------------------------------------
# stretch-move ensemble MCMC reference sampler


def stretch_move_sampler(pot: Potential, dim: int, init, n: int,
                         seeds: SeedSpec, *, n_walkers: int | None = None,
                         stretch: float = 2.0, burn_in: int = 5000,
                         thin: int = 10) -> DiscreteMeasure:
    """Affine-invariant ensemble MCMC targeting exp(-pot).

    Walkers move by stretch proposals through randomly paired partners from
    the complementary half of the ensemble, updated in two vectorized
    half-sweeps.  After burn-in, sweeps continue with every walker state
    collected until n samples accumulate.  Acceptance below 5% flags the
    output measure with a quality warning.
    """
    if n_walkers is None:
        n_walkers = 2 * (dim + 1)
    if n_walkers % 2 == 1:
        n_walkers += 1
    rng = seeds.stream(STREAM_MCMC)
    walkers = init(n_walkers, seeds).particles.copy()
    logp = -pot.raw_value(walkers)
    half = n_walkers // 2
    accepted = 0
    proposed = 0
    collected = []
    sweeps_after = thin * int(np.ceil(n / n_walkers))
    for sweep in range(burn_in + sweeps_after):
        for first in (True, False):
            move = slice(0, half) if first else slice(half, n_walkers)
            other = slice(half, n_walkers) if first else slice(0, half)
            partners = walkers[other][rng.integers(half, size=half)]
            u = rng.random(half)
            z = ((stretch - 1.0) * u + 1.0) ** 2 / stretch
            prop = partners + z[:, None] * (walkers[move] - partners)
            logp_prop = -pot.raw_value(prop)
            log_accept = (dim - 1) * np.log(z) + logp_prop - logp[move]
            take = np.log(rng.random(half)) < log_accept
            blk = walkers[move]
            blk[take] = prop[take]
            walkers[move] = blk
            lp = logp[move]
            lp[take] = logp_prop[take]
            logp[move] = lp
            accepted += int(take.sum())
            proposed += half
        if sweep >= burn_in and (sweep - burn_in) % thin == thin - 1:
            collected.append(walkers.copy())
    rate = accepted / max(proposed, 1)
    log.info("stretch-move acceptance rate %.3f", rate)
    samples = np.concatenate(collected, axis=0)[:n]
    return DiscreteMeasure.uniform(samples, quality_warning=rate < 0.05)


# ---------------------------------------------------------------------------
# registry


def make_problem(problem_id: str):
    if problem_id == "linear-gaussian-2d":
        return LinearGaussianProblem(
            A=np.eye(2), Gamma=np.eye(2), prior_mean=np.zeros(2),
            prior_cov=np.eye(2), obs=np.array([1.0, 2.0]))
    if problem_id == "mixture-k1":
        return GaussianMixtureProblem(K_modes=1)
    if problem_id == "mixture-k4":
        return GaussianMixtureProblem(K_modes=4)
    if problem_id == "darcy-d20":
        return DarcyProblem(D_grid=20, K_obs=10)
    if problem_id == "darcy-d50":
        return DarcyProblem(D_grid=50, K_obs=10)
    raise KeyError(f"unknown problem id {problem_id!r}")


PROBLEM_IDS = ("linear-gaussian-2d", "mixture-k1", "mixture-k4",
               "darcy-d20", "darcy-d50")
