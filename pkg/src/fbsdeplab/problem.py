"""Coefficient container for scalar forward-backward systems with jumps.

All coefficient callables are vectorised over paths.  Conventions:

* ``b1, sigma1, sigma2, b2``: ``(t, x, u)``
* ``f1, f2``: ``(t, x, u, e)`` where ``x`` and ``u`` carry a trailing axis of
  length one and ``e`` is the array of mark values, so results have shape
  ``(..., K)``
* ``g, l``: ``(t, x, y, z1, z2, zeta1, zeta2, u)`` with
  ``zeta_i = sum_k w_k(t) ztilde_k nu_k``; the mark weights ``w`` default to one
* ``phi, Phi``: ``(x)``; ``Gamma``: ``(y)``
* ``sigma3``: ``(t)``; ``f3``: ``(t, e)``; ``lam``: ``(t, x, e)``
* ``coupling``: optional ``(t, x, y, z1, z2, zeta1, zeta2, u)`` added to ``b2``;
  this is how backward components feed the forward drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, InvalidTilt
from .randmeasures import MarkSpace, empty_mark_space

TILT_MESSAGE = "tilt must lie in [l,1)"


def _zero3(t, x, u):
    return np.zeros(np.broadcast(x, u).shape)


def _zero4(t, x, u, e):
    return np.zeros(np.broadcast(x, u, e).shape)


def _zero_gen(t, x, y, z1, z2, zeta1, zeta2, u):
    return np.zeros(np.broadcast(x, y, u).shape)


def _one_tilt(t, x, e):
    return np.ones(np.broadcast(x, e).shape)


@dataclass(frozen=True)
class FbsdepProblem:
    b1: Callable = _zero3
    sigma1: Callable = _zero3
    sigma2: Callable = _zero3
    f1: Callable = _zero4
    f2: Callable = _zero4
    g: Callable = _zero_gen
    phi: Callable = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    b2: Callable = _zero3
    sigma3: Callable = lambda t: 1.0
    f3: Optional[Callable] = None
    lam: Callable = _one_tilt
    l: Callable = _zero_gen
    Phi: Callable = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    Gamma: Callable = lambda y: np.asarray(y, dtype=float)
    x0: float = 0.0
    ms1: MarkSpace = field(default_factory=empty_mark_space)
    ms2: MarkSpace = field(default_factory=empty_mark_space)
    zeta_weights1: Optional[Callable] = None
    zeta_weights2: Optional[Callable] = None
    coupling: Optional[Callable] = None
    tilt_floor: float = 1e-6

    def with_(self, **changes):
        return replace(self, **changes)

    @property
    def is_coupled(self):
        return self.coupling is not None

    # mark-space helpers

    def weights1(self, t):
        w = np.ones(self.ms1.size) if self.zeta_weights1 is None else self.zeta_weights1(t)
        return np.broadcast_to(np.asarray(w, dtype=float), (self.ms1.size,))

    def weights2(self, t):
        w = np.ones(self.ms2.size) if self.zeta_weights2 is None else self.zeta_weights2(t)
        return np.broadcast_to(np.asarray(w, dtype=float), (self.ms2.size,))

    def zeta(self, t, zt1, zt2):
        """Mark integrals fed to the generator, from per-mark arrays (..., K)."""
        z1 = (zt1 * self.weights1(t)) @ self.ms1.weights if self.ms1.size else np.zeros(zt1.shape[:-1])
        z2 = (zt2 * self.weights2(t)) @ self.ms2.weights if self.ms2.size else np.zeros(zt2.shape[:-1])
        return z1, z2

    # vectorised coefficient evaluation

    def jump1(self, t, x, u):
        return _marks_eval(self.f1, t, x, u, self.ms1)

    def jump2(self, t, x, u):
        return _marks_eval(self.f2, t, x, u, self.ms2)

    def tilt(self, t, x):
        """Tilt lambda(t, x, e_k), shape (..., K2); raises on values outside (0, 1]."""
        x = np.asarray(x, dtype=float)
        val = np.broadcast_to(np.asarray(self.lam(t, x[..., None], self.ms2.marks), dtype=float),
                              x.shape + (self.ms2.size,))
        if not np.all(np.isfinite(val)) or np.any(val < self.tilt_floor) or np.any(val > 1.0):
            raise InvalidTilt(TILT_MESSAGE)
        return val

    def obs_drift(self, t, x, u, bwd=None):
        """b2, including the coupling term when backward values are supplied."""
        out = _full(self.b2(t, x, u), np.shape(x))
        if self.coupling is not None and bwd is not None:
            y, z1, z2, zeta1, zeta2 = bwd
            out = out + self.coupling(t, x, y, z1, z2, zeta1, zeta2, u)
        return out

    def drift_tilde(self, t, x, u, bwd=None):
        """b1 - sigma3^-1 sigma2 b2 - int f2 (lambda - 1) nu2: the drift under the reference measure."""
        x = np.asarray(x, dtype=float)
        out = _full(self.b1(t, x, u), x.shape)
        s2 = _full(self.sigma2(t, x, u), x.shape)
        out = out - s2 * self.obs_drift(t, x, u, bwd) / self.sigma3(t)
        if self.ms2.size:
            out = out - ((self.tilt(t, x) - 1.0) * self.jump2(t, x, u)) @ self.ms2.weights
        return out

    def generator(self, t, x, y, z1, z2, zt1, zt2, u):
        zeta1, zeta2 = self.zeta(t, zt1, zt2)
        return _full(self.g(t, x, y, z1, z2, zeta1, zeta2, u), np.shape(y))

    def check_observation(self, grid):
        s3 = np.array([self.sigma3(t) for t in grid.nodes], dtype=float)
        if not np.all(np.isfinite(s3)) or np.any(s3 == 0):
            raise InvalidArgument("sigma3 must be finite and nonzero on the grid")


def _full(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


def _marks_eval(f, t, x, u, ms):
    x = np.asarray(x, dtype=float)
    shape = x.shape + (ms.size,)
    if ms.size == 0:
        return np.zeros(shape)
    u = np.broadcast_to(np.asarray(u, dtype=float), x.shape)
    return _full(f(t, x[..., None], u[..., None], ms.marks), shape)


def fd1(fun, args, idx, rel=1e-5):
    """Central first difference of ``fun`` in argument ``idx``."""
    a = np.asarray(args[idx], dtype=float)
    h = rel * (1.0 + np.abs(a))
    up = list(args)
    dn = list(args)
    up[idx] = a + h
    dn[idx] = a - h
    diff = np.asarray(fun(*up)) - np.asarray(fun(*dn))
    return diff / _expand(2 * h, diff.ndim)


def fd2(fun, args, i, j, rel=1e-4):
    """Central second difference (mixed when ``i != j``)."""
    if i == j:
        a = np.asarray(args[i], dtype=float)
        h = rel * (1.0 + np.abs(a))
        up, dn = list(args), list(args)
        up[i], dn[i] = a + h, a - h
        f0 = np.asarray(fun(*args))
        den = h * h
        return (np.asarray(fun(*up)) - 2 * f0 + np.asarray(fun(*dn))) / _expand(den, f0.ndim)
    ai = np.asarray(args[i], dtype=float)
    aj = np.asarray(args[j], dtype=float)
    hi = rel * (1.0 + np.abs(ai))
    hj = rel * (1.0 + np.abs(aj))
    vals = []
    for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        a = list(args)
        a[i], a[j] = ai + si * hi, aj + sj * hj
        vals.append(np.asarray(fun(*a)))
    den = 4 * hi * hj
    return (vals[0] - vals[1] - vals[2] + vals[3]) / _expand(den, vals[0].ndim)


def _expand(h, ndim):
    h = np.asarray(h)
    while h.ndim < ndim:
        h = h[..., None]
    return h
