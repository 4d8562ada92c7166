"""Least-squares Monte Carlo engine for backward equations with jumps.

At each step the conditional expectations are projections onto a global
polynomial basis in the step's features.  The martingale components come
from regressing the one-step martingale increment against the driver
increments:

    z^i     ~ E[M dW^i] / dt
    zt_k^i  ~ E[M dNc_k^i] / (nu_k dt)

with ``M = Y_{i+1} - E[Y_{i+1} | F_i]``.  The backward step is explicit,
``Y_i = E[Y_{i+1} | F_i] + g(...) dt``.
"""

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .errors import IllConditionedBasis, InsufficientPaths

RANK_TOL = 1e-10


def monomial_exponents(dim, degree):
    """Exponent tuples of all monomials of total degree <= ``degree`` in ``dim`` variables."""
    out = [(0,) * dim]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(dim), deg):
            e = [0] * dim
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


def basis_size(dim, degree):
    return len(monomial_exponents(dim, degree))


def poly_design(features, degree):
    """Design matrix of standardised monomials; constant feature columns are dropped."""
    f = np.asarray(features, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    n = f.shape[0]
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    f = (f[:, keep] - mu[keep]) / sd[keep]
    cols = [np.ones(n)]
    for e in monomial_exponents(f.shape[1], degree)[1:]:
        col = np.ones(n)
        for j, p in enumerate(e):
            if p:
                col = col * f[:, j] ** p
        cols.append(col)
    return np.column_stack(cols)


class Projector:
    """Orthogonal projection onto the column space of a design matrix."""

    def __init__(self, design, step=None):
        q, r = np.linalg.qr(design)
        d = np.abs(np.diag(r))
        if d.size and d.min() <= RANK_TOL * d.max():
            raise IllConditionedBasis("rank-deficient regression basis", step=step)
        self.q = q
        self.r = r

    @property
    def n_basis(self):
        return self.q.shape[1]

    def fit(self, v):
        return self.q @ (self.q.T @ v)

    def coef(self, v):
        return np.linalg.solve(self.r, self.q.T @ v)


@dataclass
class BackwardPaths:
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    zt1: np.ndarray
    zt2: np.ndarray
    y0_se: float
    # per-step standard error of the conditional-mean projection
    proj_se: np.ndarray = None
    # E[Y_{i+1} | F_i] per step, kept on request
    yhat: np.ndarray = None


def _as_features(features, n_paths, n_nodes):
    f = np.asarray(features, dtype=float)
    if f.ndim == 2:
        f = f[:, :, None]
    if f.shape[:2] != (n_paths, n_nodes):
        raise ValueError("features must have shape (n_paths, n_steps + 1[, d])")
    return f


def solve_backward(terminal, generator, features, bundle, degree=3, name=None, keep_yhat=False):
    """Backward induction for ``-dY = g dt - z dW - int zt dNc`` with ``Y_T = terminal``.

    ``generator(i, y, z1, z2, zt1, zt2)`` returns the driver at step ``i`` given
    the projected ``y = E[Y_{i+1} | F_i]`` and the step's martingale estimates.
    """
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    feats = _as_features(features, n_paths, n + 1)
    n_basis = basis_size(feats.shape[2], degree)
    if n_paths < 10 * n_basis:
        raise InsufficientPaths(f"need at least {10 * n_basis} paths for a basis of size {n_basis}")
    k1, k2 = bundle.ms1.size, bundle.ms2.size
    nu1, nu2 = bundle.ms1.weights, bundle.ms2.weights
    dn1 = bundle.compensated1()
    dn2 = bundle.compensated2()

    y = np.empty((n_paths, n + 1))
    z1 = np.zeros((n_paths, n))
    z2 = np.zeros((n_paths, n))
    zt1 = np.zeros((n_paths, n, k1))
    zt2 = np.zeros((n_paths, n, k2))
    y[:, n] = terminal
    realized = np.array(terminal, dtype=float, copy=True)
    proj_se = np.zeros(n)
    yhats = np.empty((n_paths, n)) if keep_yhat else None

    for i in range(n - 1, -1, -1):
        dt = grid.dt[i]
        try:
            proj = Projector(poly_design(feats[:, i], degree), step=i)
        except IllConditionedBasis as exc:
            if name:
                raise IllConditionedBasis(f"{name}: rank-deficient regression basis", step=i) from exc
            raise
        nxt = y[:, i + 1]
        yhat = proj.fit(nxt)
        if keep_yhat:
            yhats[:, i] = yhat
        mart = nxt - yhat
        proj_se[i] = np.sqrt(np.mean(mart ** 2) * proj.n_basis / n_paths)
        resp = [mart * bundle.dw1[:, i], mart * bundle.dw2[:, i]]
        resp += [mart * dn1[:, i, k] for k in range(k1)]
        resp += [mart * dn2[:, i, k] for k in range(k2)]
        fitted = proj.fit(np.column_stack(resp))
        z1[:, i] = fitted[:, 0] / dt
        z2[:, i] = fitted[:, 1] / dt
        for k in range(k1):
            if nu1[k] > 0:
                zt1[:, i, k] = fitted[:, 2 + k] / (nu1[k] * dt)
        for k in range(k2):
            if nu2[k] > 0:
                zt2[:, i, k] = fitted[:, 2 + k1 + k] / (nu2[k] * dt)
        gval = np.asarray(generator(i, yhat, z1[:, i], z2[:, i], zt1[:, i], zt2[:, i]), dtype=float)
        y[:, i] = yhat + gval * dt
        realized += gval * dt
    se = float(realized.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return BackwardPaths(y, z1, z2, zt1, zt2, se, proj_se, yhats)
