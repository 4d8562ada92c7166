"""Nonlinear filtering with jump observations.

Signal and observation::

    dh = H(t, h) dt + b1 dW1 + b2 dW2 + int c1 dN1c + int c2 dN2c
    dY = A(t, h) dt + B(t, Y) dW2 + int C(t, Y-) dN2c

The conditional mean ``pi(h)`` solves

    d pi(h) = pi(H) dt + [pi(b2) + (pi(A h) - pi(A) pi(h)) / B] dWbar + int pi(c2) dN2c

with the innovation ``dWbar = (dY - pi(A) dt - int C dN2c) / B``.  The
equation is not closed in general.  ``LinearFilterSystem`` (affine drift and
observation drift, deterministic loadings) closes exactly through the
conditional variance; other systems must supply a closure callback.

``particle_oracle`` is an independent bootstrap particle filter used to check
the integrator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NumericDivergence, UnclosedSystem
from .randmeasures import MarkSpace, empty_mark_space, sample_driver_bundle
from .rng import STREAM_INITIAL, STREAM_PARTICLES, substream

ESS_FLOOR = 10.0


def _const(v, size=None):
    if callable(v):
        return v
    if size is None:
        val = float(v)
    else:
        val = np.broadcast_to(np.asarray(v, dtype=float), (size,)).copy()
    return lambda t, *args, _v=val: _v


@dataclass(frozen=True)
class FilterSystem:
    """Signal-observation pair.

    ``drift(t, h)`` and ``obs_drift(t, h)`` act elementwise on arrays of
    signal values; ``obs_noise(t, y)`` and ``obs_jump(t, y)`` depend on the
    current observation (``obs_jump`` returns one size per mark of ``ms2``).
    ``intensity2(t, h)``, if given, multiplies the observation-jump intensity
    ``nu2`` mark-wise and is only understood by the particle oracle.
    """

    drift: Callable
    b1: Callable
    b2: Callable
    c1: Callable
    c2: Callable
    obs_drift: Callable
    obs_noise: Callable
    obs_jump: Callable
    ms1: MarkSpace = field(default_factory=empty_mark_space)
    ms2: MarkSpace = field(default_factory=empty_mark_space)
    h0_mean: float = 0.0
    h0_sd: float = 0.0
    intensity2: Optional[Callable] = None

    def closure(self, t, pi_h, aux):
        raise UnclosedSystem(
            "no closure for the conditional moments of this system; "
            "pass closure= or use LinearFilterSystem")

    def initial_aux(self):
        raise UnclosedSystem("no closure for the conditional moments of this system")

    def check(self, grid, probe=(-10.0, -1.0, 0.0, 1.0, 10.0)):
        """Spot checks: B bounded away from zero and C nonvanishing on probe points."""
        for t in grid.nodes[:: max(1, grid.n_steps // 10)]:
            for y in probe:
                b = float(self.obs_noise(t, y))
                if not np.isfinite(b) or abs(b) < 1e-12:
                    raise InvalidArgument(f"observation noise must be invertible (t={t:g}, Y={y:g})")
                if self.ms2.size:
                    c = np.asarray(self.obs_jump(t, y), dtype=float)
                    if np.any(c == 0):
                        raise InvalidArgument(f"observation jump sizes must not vanish (t={t:g})")


class LinearFilterSystem(FilterSystem):
    """``H = a h + h_const``, ``A = alpha h + alpha_const``, deterministic loadings."""

    def __init__(self, a, h_const, b1, b2, c1, c2, alpha, alpha_const, B, C,
                 ms1=None, ms2=None, h0_mean=0.0, h0_sd=0.0):
        ms1 = empty_mark_space() if ms1 is None else ms1
        ms2 = empty_mark_space() if ms2 is None else ms2
        a, h_const = _const(a), _const(h_const)
        alpha, alpha_const = _const(alpha), _const(alpha_const)
        B, C = _const(B), _const(C, ms2.size)
        super().__init__(
            drift=lambda t, h: a(t) * h + h_const(t),
            b1=_const(b1), b2=_const(b2),
            c1=_const(c1, ms1.size), c2=_const(c2, ms2.size),
            obs_drift=lambda t, h: alpha(t) * h + alpha_const(t),
            obs_noise=lambda t, y: B(t),
            obs_jump=lambda t, y: C(t),
            ms1=ms1, ms2=ms2, h0_mean=float(h0_mean), h0_sd=float(h0_sd))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "h_const", h_const)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_const", alpha_const)

    def initial_aux(self):
        return self.h0_sd ** 2

    def variance_rate(self, t, v):
        """Riccati right-hand side for the conditional variance."""
        a, al, b, b1, b2 = self.a(t), self.alpha(t), self.obs_noise(t, 0.0), self.b1(t), self.b2(t)
        c1 = self.c1(t)
        gain = b2 + al * v / b
        return 2 * a * v + b1 ** 2 + self.ms1.integrate(c1 ** 2) + b2 ** 2 - gain ** 2

    def closure(self, t, pi_h, aux):
        v = aux
        return SimpleNamespace(
            pi_H=self.drift(t, pi_h),
            pi_A=self.obs_drift(t, pi_h),
            pi_b2=self.b2(t),
            cov_Ah=self.alpha(t) * v,
            pi_c2=self.c2(t),
            aux_rate=self.variance_rate(t, v),
        )

    def stationary_sd(self):
        """Unconditional stationary SD of the signal (time-homogeneous, ``a < 0``)."""
        a = self.a(0.0)
        if a >= 0:
            raise InvalidArgument("stationary law needs a negative mean-reversion rate")
        q = (self.b1(0.0) ** 2 + self.b2(0.0) ** 2 + self.ms1.integrate(self.c1(0.0) ** 2)
             + self.ms2.integrate(self.c2(0.0) ** 2))
        return float(np.sqrt(q / (-2 * a)))


@dataclass
class ObservationPath:
    """Observation increments on a grid: ``dy`` (P, n), ``counts2`` (P, n, K2) and ``y`` (P, n+1)."""

    grid: object
    y: np.ndarray
    dy: np.ndarray
    counts2: np.ndarray

    @property
    def n_paths(self):
        return self.y.shape[0]

    def path(self, p):
        return ObservationPath(self.grid, self.y[p:p + 1], self.dy[p:p + 1], self.counts2[p:p + 1])


@dataclass
class FilterPath:
    pi_h: np.ndarray
    pi_A: np.ndarray = None
    cov_Ah: np.ndarray = None
    pi_b2: np.ndarray = None
    pi_c2: np.ndarray = None
    aux: np.ndarray = None
    innovation: np.ndarray = None
    ess: np.ndarray = None
    degenerate: bool = False


def simulate_signal_observation(system, grid, n_paths, seed, threads=1):
    """Euler paths of the signal and observation.  Returns ``(h, obs, bundle)``."""
    bundle = sample_driver_bundle(grid, system.ms1, system.ms2, n_paths, seed, threads=threads)
    rng = substream(seed, STREAM_INITIAL)
    n = grid.n_steps
    h = np.empty((n_paths, n + 1))
    y = np.zeros((n_paths, n + 1))
    h[:, 0] = system.h0_mean + system.h0_sd * rng.standard_normal(n_paths)
    comp1, comp2 = bundle.compensated1(), bundle.compensated2()
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        hi, yi = h[:, i], y[:, i]
        dw1, dw2 = bundle.dw1[:, i], bundle.dw2[:, i]
        hn = hi + system.drift(t, hi) * dt + system.b1(t) * dw1 + system.b2(t) * dw2
        if system.ms1.size:
            hn = hn + comp1[:, i] @ system.c1(t)
        if system.ms2.size:
            hn = hn + comp2[:, i] @ system.c2(t)
        yn = yi + system.obs_drift(t, hi) * dt + system.obs_noise(t, yi) * dw2
        if system.ms2.size:
            yn = yn + np.sum(comp2[:, i] * np.asarray(system.obs_jump(t, yi)), axis=-1)
        h[:, i + 1] = hn
        y[:, i + 1] = yn
    obs = ObservationPath(grid, y, np.diff(y, axis=1), bundle.counts2())
    return h, obs, bundle


def _jump_part(system, t, y, counts, dt):
    """``int C(t, Y-) dN2c`` over one step, shape (P,)."""
    if not system.ms2.size:
        return np.zeros_like(y)
    comp = counts - system.ms2.weights * dt
    return np.sum(comp * np.asarray(system.obs_jump(t, y)), axis=-1)


def integrate_innovation_filter(system, obs, closure=None, aux0=0.0):
    """Euler integration of the filtering equation along each observation path.

    ``closure(t, pi_h, aux)`` returns a namespace with ``pi_H, pi_A, pi_b2,
    cov_Ah, pi_c2, aux_rate``; it defaults to ``system.closure``.  ``aux0`` is the
    initial auxiliary state of a user closure.
    """
    grid = obs.grid
    close = system.closure if closure is None else closure
    n, P, K2 = grid.n_steps, obs.n_paths, system.ms2.size
    pi = np.empty((P, n + 1))
    aux = np.empty((P, n + 1))
    pi_A = np.empty((P, n))
    cov = np.empty((P, n))
    pb2 = np.empty((P, n))
    pc2 = np.empty((P, n, K2))
    innov = np.empty((P, n))
    pi[:, 0] = system.h0_mean
    aux[:, 0] = system.initial_aux() if closure is None else aux0
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        m = close(t, pi[:, i], aux[:, i])
        yi = obs.y[:, i]
        b = system.obs_noise(t, yi)
        jump = _jump_part(system, t, yi, obs.counts2[:, i], dt)
        dwbar = (obs.dy[:, i] - m.pi_A * dt - jump) / b
        gain = m.pi_b2 + m.cov_Ah / b
        new = pi[:, i] + m.pi_H * dt + gain * dwbar
        c2 = np.broadcast_to(np.asarray(m.pi_c2, dtype=float), (P, K2))
        if K2:
            new = new + np.sum(c2 * (obs.counts2[:, i] - system.ms2.weights * dt), axis=-1)
        if not np.all(np.isfinite(new)):
            raise NumericDivergence("filter diverged", step=i)
        pi[:, i + 1] = new
        aux[:, i + 1] = aux[:, i] + m.aux_rate * dt
        pi_A[:, i] = m.pi_A
        cov[:, i] = m.cov_Ah
        pb2[:, i] = m.pi_b2
        pc2[:, i] = c2
        innov[:, i] = dwbar
    return FilterPath(pi, pi_A, cov, pb2, pc2, aux, innov)


def _systematic_resample(rng, w):
    n = w.size
    pos = (rng.uniform() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(w), pos)
    return np.minimum(idx, n - 1)


def particle_oracle(system, obs_path, n_particles, seed, resample="always"):
    """Bootstrap particle filter for one observation path.

    Each particle carries its own signal; the observation Brownian increment
    it implies, ``(dY - A dt - int C dN2c) / B``, drives the correlated part of
    the signal, and the Gaussian likelihood of ``dY`` weights it.  Observation
    jumps weigh particles by the mark-wise intensity ratio ``intensity2``
    (identically one when the intensity does not depend on the signal).
    Resampling is systematic, at every step by default (``resample="ess"``
    resamples only below half the particle count).  ``degenerate`` flags an
    effective sample size below 10.
    """
    if n_particles < 2:
        raise InvalidArgument("n_particles must be at least 2")
    if obs_path.n_paths != 1:
        raise InvalidArgument("particle_oracle takes a single observation path")
    grid = obs_path.grid
    n, K1, K2 = grid.n_steps, system.ms1.size, system.ms2.size
    rng = substream(seed, STREAM_PARTICLES)
    h = system.h0_mean + system.h0_sd * rng.standard_normal(n_particles)
    w = np.full(n_particles, 1.0 / n_particles)
    mean = np.empty(n + 1)
    ess = np.empty(n)
    mean[0] = np.sum(w * h)
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        yi = obs_path.y[0, i]
        cnt = obs_path.counts2[0, i]
        b = float(system.obs_noise(t, yi))
        jump = float(_jump_part(system, t, np.asarray([yi]), cnt[None, :], dt)[0])
        resid = obs_path.dy[0, i] - jump - system.obs_drift(t, h) * dt
        logw = np.log(w) - resid ** 2 / (2 * b * b * dt)
        if K2 and system.intensity2 is not None:
            ratio = np.asarray(system.intensity2(t, h), dtype=float).reshape(n_particles, K2)
            logw = logw + np.log(ratio) @ cnt - ((ratio - 1.0) @ system.ms2.weights) * dt
        dw2 = resid / b
        hn = h + system.drift(t, h) * dt + system.b1(t) * np.sqrt(dt) * rng.standard_normal(n_particles)
        hn = hn + system.b2(t) * dw2
        if K1:
            n1 = rng.poisson(system.ms1.weights * dt, size=(n_particles, K1))
            hn = hn + (n1 - system.ms1.weights * dt) @ system.c1(t)
        if K2:
            hn = hn + (cnt - system.ms2.weights * dt) @ system.c2(t)
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        ess[i] = 1.0 / np.sum(w * w)
        mean[i + 1] = np.sum(w * hn)
        h = hn
        if resample == "always" or ess[i] < 0.5 * n_particles:
            h = h[_systematic_resample(rng, w)]
            w = np.full(n_particles, 1.0 / n_particles)
    return FilterPath(mean, ess=ess, degenerate=bool(np.min(ess) < ESS_FLOOR))


def innovation_check(system, signal, obs, fpath, bundle, k=5.0):
    """Innovation increments from the observations and from ``int B^-1 (A - pi(A)) ds + W2``.

    Returns a namespace with both routes' maximum difference and the pooled
    mean and variance of the standardised increments with their SEs.
    """
    grid = obs.grid
    dt = grid.dt[None, :]
    t = grid.nodes[:-1]
    a_true = np.stack([system.obs_drift(t[i], signal[:, i]) for i in range(grid.n_steps)], axis=1)
    b = np.stack([np.broadcast_to(system.obs_noise(t[i], obs.y[:, i]), (obs.n_paths,))
                  for i in range(grid.n_steps)], axis=1)
    drift_route = (a_true - fpath.pi_A) * dt / b + bundle.dw2
    xi = (fpath.innovation / np.sqrt(dt)).ravel()
    m = xi.size
    mean, var = xi.mean(), xi.var(ddof=1)
    mean_se = np.sqrt(var / m)
    var_se = np.sqrt(max(np.mean((xi * xi - var) ** 2), 1e-300) / m)
    z_mean, z_var = mean / mean_se, (var - 1.0) / var_se
    return SimpleNamespace(
        route_gap=float(np.max(np.abs(drift_route - fpath.innovation))),
        mean=float(mean), mean_se=float(mean_se), var=float(var), var_se=float(var_se),
        passed=bool(abs(z_mean) < k and abs(z_var) < k),
    )


def filter_rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def linear_test_system(**overrides):
    """The shipped linear test system, started in its stationary law."""
    kw = dict(a=-1.0, h_const=0.0, b1=0.6, b2=0.3, c1=[0.4], c2=[0.3, -0.2],
              alpha=1.5, alpha_const=0.0, B=0.5, C=[1.0, 2.0],
              ms1=MarkSpace([1.0], [0.5]), ms2=MarkSpace([1.0, 2.0], [0.8, 0.4]))
    kw.update(overrides)
    if "h0_sd" not in kw:
        kw["h0_sd"] = LinearFilterSystem(**kw).stationary_sd()
    return LinearFilterSystem(**kw)
