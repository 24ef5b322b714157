"""Independent reference implementations used to check the library.

Everything here is deliberately written in the most direct way possible
(dense matrices, explicit loops, textbook iterations) so that agreement with
the library is meaningful.
"""

import numpy as np


def central_fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def dense_entropic_oracle(x, a, y, b, eps, max_iters=200000, tol=1e-14):
    """Entropy-regularized transport cost by plain dense kernel scaling.

    Returns the primal objective sum(pi * C) + eps * KL(pi | a x b) of the
    plan produced by unstabilized Sinkhorn scaling run to near machine
    precision on the marginals.  At the fixed point this equals the dual
    objective <f, a> + <g, b>.
    """
    diff = x[:, None, :] - y[None, :, :]
    C = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    K = np.exp(-C / eps)
    u = np.ones(len(a))
    v = np.ones(len(b))
    for it in range(max_iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
        if it % 100 == 99:
            pi = u[:, None] * K * v[None, :]
            err = max(np.abs(pi.sum(axis=1) - a).max(),
                      np.abs(pi.sum(axis=0) - b).max())
            if err < tol:
                break
    pi = u[:, None] * K * v[None, :]
    ref = a[:, None] * b[None, :]
    kl = np.sum(pi * np.log(pi / ref))
    return float(np.sum(pi * C) + eps * kl)


def covariance_rank(cov, threshold=1e-10):
    """Numerical rank of a symmetric PSD matrix by relative eigenvalue cut."""
    w = np.linalg.eigvalsh(cov)
    scale = max(w.max(), 1e-300)
    return int(np.sum(w > threshold * scale))


def direct_forward_call_sum(b0, event_steps, event_sizes, n_steps,
                            s_values=None):
    """Forward/free calls by brute-force per-step summation.

    event_steps[i] is the step index from which event i's particles are
    charged.  s_values, if given, is the schedule value at the start of each
    step; steps with s == 0 are booked as free.
    """
    fc = 0
    free = 0
    for k in range(n_steps):
        batch = b0
        for es, bs in zip(event_steps, event_sizes):
            if k >= es:
                batch += bs
        if s_values is not None and s_values[k] == 0.0:
            free += batch
        else:
            fc += batch
    return fc, free
