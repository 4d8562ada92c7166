"""Spike variations, variational equations, adjoint systems and the Hamiltonian gap.

Everything is computed path-wise along a reference trajectory that lives on a
``DriverBundle`` under the reference measure.  Coefficient derivatives are
central finite differences evaluated at the reference state of each step, so
user problems only supply the coefficient functions themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .errors import InsufficientPaths, InvalidArgument
from .fbsdep import (ForwardPaths, check_marks, control_array, simulate_forward,
                     solve_bsdep, solve_coupled_picard)
from .girsanov import simulate_gamma_tilde
from .problem import fd1, fd2
from .randmeasures import DriverBundle, JumpTrain
from .regression import solve_backward

OVERLAP_TOL = 1e-12


# spike controls


@dataclass(frozen=True)
class SpikeSpec:
    t_bar: float
    eps: float
    u: float

    def __post_init__(self):
        if not np.isfinite(self.t_bar) or self.t_bar < 0:
            raise InvalidArgument("spike start must be >= 0")
        if not np.isfinite(self.eps) or self.eps <= 0:
            raise InvalidArgument("spike width must be > 0")
        if not np.isfinite(self.u):
            raise InvalidArgument("spike value must be finite")

    def check(self, grid):
        T = grid.nodes[-1]
        if self.t_bar >= T or self.t_bar + self.eps > T * (1 + OVERLAP_TOL):
            raise InvalidArgument("spike window must satisfy t_bar + eps <= T")


def spike_window(grid, spec):
    """Steps whose interval (t_i, t_{i+1}] meets (t_bar, t_bar + eps] with positive length."""
    spec.check(grid)
    lo = np.maximum(grid.nodes[:-1], spec.t_bar)
    hi = np.minimum(grid.nodes[1:], spec.t_bar + spec.eps)
    return hi - lo > OVERLAP_TOL * grid.nodes[-1]


def build_spike_control(base, spec, jumps2, grid=None):
    """Replace the base control by ``spec.u`` on the spike window, except on steps holding an observation jump.

    ``jumps2`` is either a ``JumpTrain`` (single path, ``grid`` required) or a
    ``DriverBundle``, in which case the exclusion is path-wise.
    """
    if isinstance(jumps2, DriverBundle):
        grid = jumps2.grid
        event = jumps2.has_jump2()
    elif isinstance(jumps2, JumpTrain):
        if grid is None:
            raise InvalidArgument("grid required with a JumpTrain")
        event = np.zeros((1, grid.n_steps), dtype=bool)
        event[0, np.asarray(jumps2.step_index, dtype=np.int64)] = True
    else:
        raise InvalidArgument("expected a JumpTrain or a DriverBundle")
    window = spike_window(grid, spec)
    mask = window[None, :] & ~event
    base_arr = control_array(base, event.shape[0], grid.n_steps)
    out = np.where(mask, spec.u, base_arr)
    if isinstance(jumps2, JumpTrain) and np.ndim(base) < 2:
        return out[0]
    return out


# reference trajectory


@dataclass
class Trajectory:
    problem: object
    bundle: DriverBundle
    u: np.ndarray
    x: np.ndarray
    x_left: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    zt1: np.ndarray
    zt2: np.ndarray
    log_gamma: np.ndarray
    features: np.ndarray
    y0_se: float = float("nan")

    @property
    def grid(self):
        return self.bundle.grid

    @property
    def gamma(self):
        return np.exp(self.log_gamma)


def _stack_features(*parts):
    cols = []
    for p in parts:
        p = np.asarray(p, dtype=float)
        cols.append(p[:, :, None] if p.ndim == 2 else p)
    return np.concatenate(cols, axis=2)


def optimal_trajectory(problem, control, bundle, degree=3, extra_features=None):
    """Forward state, backward solution and density along a given (candidate optimal) control."""
    check_marks(problem, bundle)
    n_paths, n = bundle.n_paths, bundle.grid.n_steps
    u = np.array(control_array(control, n_paths, n))
    frozen = None
    if problem.is_coupled:
        sol = solve_coupled_picard(problem, u, bundle, degree=degree)
        frozen = sol.frozen(problem, bundle.grid)
    fwd = simulate_forward(problem, u, bundle, frozen=frozen, record_left=True)
    feats = fwd.x if extra_features is None else _stack_features(fwd.x, extra_features)
    sol = solve_bsdep(problem, fwd, u, bundle, degree=degree, features=feats)
    lg = simulate_gamma_tilde(problem, u, fwd, bundle, frozen=frozen).log_values
    return Trajectory(problem, bundle, u, fwd.x, fwd.x_left, sol.y, sol.z1, sol.z2, sol.zt1, sol.zt2,
                      lg, _stack_features(feats), sol.y0_se)


# linearisation along the trajectory


def _full(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


def _lam_raw(problem, t, x):
    x = np.asarray(x, dtype=float)
    return _full(problem.lam(t, x[..., None], problem.ms2.marks), x.shape + (problem.ms2.size,))


def full_drift(problem, t, x, u):
    """Drift of the simulated state: reference-measure drift with both compensators folded in."""
    d = problem.drift_tilde(t, x, u)
    if problem.ms1.size:
        d = d - problem.jump1(t, x, u) @ problem.ms1.weights
    if problem.ms2.size:
        d = d - problem.jump2(t, x, u) @ problem.ms2.weights
    return d


def _linearize(problem, traj, i, second=False):
    """Coefficient values and derivatives at the reference state of step ``i``."""
    t = traj.grid.nodes[i]
    x, u = traj.x[:, i], traj.u[:, i]
    shape = x.shape
    c = SimpleNamespace(t=t, x=x, u=u, gam=np.exp(traj.log_gamma[:, i]))
    zeta1, zeta2 = problem.zeta(t, traj.zt1[:, i], traj.zt2[:, i])
    c.args = (x, traj.y[:, i], traj.z1[:, i], traj.z2[:, i], zeta1, zeta2)
    c.gfun = lambda *a: _full(problem.g(t, *a, u), shape)
    c.lfun = lambda *a: _full(problem.l(t, *a, u), shape)
    c.gd = [fd1(c.gfun, c.args, j) for j in range(6)]
    c.ld = [fd1(c.lfun, c.args, j) for j in range(6)]
    c.lval = c.lfun(*c.args)

    bt = lambda xx: problem.drift_tilde(t, xx, u)
    s1 = lambda xx: _full(problem.sigma1(t, xx, u), np.shape(xx))
    s2 = lambda xx: _full(problem.sigma2(t, xx, u), np.shape(xx))
    f1 = lambda xx: problem.jump1(t, xx, u)
    f2 = lambda xx: problem.jump2(t, xx, u)
    b2 = lambda xx: problem.obs_drift(t, xx, u)
    lam = lambda xx: _lam_raw(problem, t, xx)
    c.b1x, c.s1x, c.s2x = fd1(bt, (x,), 0), fd1(s1, (x,), 0), fd1(s2, (x,), 0)
    c.f1x, c.f2x = fd1(f1, (x,), 0), fd1(f2, (x,), 0)
    c.sigma3 = problem.sigma3(t)
    c.b2 = b2(x)
    c.b2x = fd1(b2, (x,), 0)
    c.lam = problem.tilt(t, x)
    c.lamx = fd1(lam, (x,), 0)
    c.w1, c.w2 = problem.weights1(t), problem.weights2(t)
    c.nu1, c.nu2 = problem.ms1.weights, problem.ms2.weights
    # reference-measure quantities: tilde b2 = G b2 / sigma3 and f4 = G (lambda - 1)
    c.bt2 = c.gam * c.b2 / c.sigma3
    c.bt2x = c.gam * c.b2x / c.sigma3
    c.f4 = c.gam[:, None] * (c.lam - 1.0)
    c.f4x = c.gam[:, None] * c.lamx
    if second:
        c.b1xx, c.s1xx, c.s2xx = fd2(bt, (x,), 0, 0), fd2(s1, (x,), 0, 0), fd2(s2, (x,), 0, 0)
        c.f1xx, c.f2xx = fd2(f1, (x,), 0, 0), fd2(f2, (x,), 0, 0)
        c.bt2xx = c.gam * fd2(b2, (x,), 0, 0) / c.sigma3
        c.f4xx = c.gam[:, None] * fd2(lam, (x,), 0, 0)
    return c


def _dir2(fun, args, direction, rel=1e-4):
    """Second derivative of ``fun`` along ``direction`` (one vector per path)."""
    scale = 1.0 + sum(np.abs(a) for a in args)
    norm = 1.0 + sum(np.abs(d) for d in direction)
    h = rel * scale / norm
    up = [a + h * d for a, d in zip(args, direction)]
    dn = [a - h * d for a, d in zip(args, direction)]
    return (fun(*up) - 2.0 * fun(*args) + fun(*dn)) / (h * h)


def _mark_sum(v, nu):
    return v @ nu if nu.size else np.zeros(v.shape[0])


def _terminal_derivs(problem, fun, x):
    f = lambda xx: _full(fun(xx), np.shape(xx))
    return fd1(f, (x,), 0), fd2(f, (x,), 0, 0)


# adjoint systems


@dataclass
class AdjointBundle:
    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    qt1: np.ndarray
    qt2: np.ndarray
    h: np.ndarray
    m: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    nt1: np.ndarray
    nt2: np.ndarray
    r: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    st1: np.ndarray
    st2: np.ndarray
    alpha: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    betat1: np.ndarray
    betat2: np.ndarray
    P: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    Qt1: np.ndarray
    Qt2: np.ndarray
    k11: np.ndarray
    k12: np.ndarray
    k21: np.ndarray
    k22: np.ndarray
    p_proj_se: np.ndarray = None


def solve_adjoint_bundle(problem, traj, degree=2):
    """Solve the first-order, cost, density, cross and second-order adjoint systems.

    Backward systems use the regression engine on the trajectory's features
    (plus ``h`` where it enters the terminal value or the driver).  ``h`` is a
    forward linear equation started at ``Gamma'(mean y0)``.
    """
    bundle, grid = traj.bundle, traj.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    nu1, nu2 = problem.ms1.weights, problem.ms2.weights
    base = traj.features
    xT = traj.x[:, -1]
    gamT = np.exp(traj.log_gamma[:, -1])
    phix, phixx = _terminal_derivs(problem, problem.phi, xT)
    Phix, Phixx = _terminal_derivs(problem, problem.Phi, xT)

    # first order: p
    cache = {k: np.zeros((n_paths, n)) for k in ("s1x", "s2x")}
    cache["f1x"] = np.zeros((n_paths, n, problem.ms1.size))
    cache["f2x"] = np.zeros((n_paths, n, problem.ms2.size))

    def gen_p(i, p, q1, q2, qt1, qt2):
        c = _linearize(problem, traj, i)
        cache["s1x"][:, i], cache["s2x"][:, i] = c.s1x, c.s2x
        cache["f1x"][:, i], cache["f2x"][:, i] = c.f1x, c.f2x
        gx, gy, gz1, gz2, gzeta1, gzeta2 = c.gd
        k11 = c.s1x * p + q1
        k12 = c.s2x * p + q2
        k21 = c.f1x * p[:, None] + qt1 + c.f1x * qt1
        k22 = c.f2x * p[:, None] + qt2 + c.f2x * qt2
        return (c.b1x * p + c.s1x * q1 + c.s2x * q2 + gx + gy * p + gz1 * k11 + gz2 * k12
                + gzeta1 * _mark_sum(k21 * c.w1, nu1) + gzeta2 * _mark_sum(k22 * c.w2, nu2)
                + _mark_sum(c.f1x * qt1, nu1) + _mark_sum(c.f2x * qt2, nu2))

    bp = solve_backward(phix, gen_p, base, bundle, degree=degree, name="p")
    p = bp.y
    pl = p[:, :-1]
    k11 = cache["s1x"] * pl + bp.z1
    k12 = cache["s2x"] * pl + bp.z2
    k21 = cache["f1x"] * pl[:, :, None] + bp.zt1 + cache["f1x"] * bp.zt1
    k22 = cache["f2x"] * pl[:, :, None] + bp.zt2 + cache["f2x"] * bp.zt2
    del cache

    # forward part of the cost adjoint: h
    dn1, dn2 = bundle.compensated1(), bundle.compensated2()
    h = np.empty((n_paths, n + 1))
    y0 = np.array([np.mean(traj.y[:, 0])])
    h[:, 0] = fd1(lambda v: _full(problem.Gamma(v), np.shape(v)), (y0,), 0)[0]
    for i in range(n):
        c = _linearize(problem, traj, i)
        gx, gy, gz1, gz2, gzeta1, gzeta2 = c.gd
        lx, ly, lz1, lz2, lzeta1, lzeta2 = c.ld
        hi = h[:, i]
        inc = (c.gam * ly + hi * gy) * grid.dt[i]
        inc += (c.gam * lz1 + hi * gz1) * bundle.dw1[:, i] + (c.gam * lz2 + hi * gz2) * bundle.dw2[:, i]
        inc += (c.gam * lzeta1 + hi * gzeta1) * _mark_sum(dn1[:, i] * c.w1, np.ones(problem.ms1.size))
        inc += (c.gam * lzeta2 + hi * gzeta2) * _mark_sum(dn2[:, i] * c.w2, np.ones(problem.ms2.size))
        h[:, i + 1] = hi + inc
    del dn1, dn2
    with_h = _stack_features(base, h)

    # density adjoint: r
    def gen_r(i, r, s1, s2, st1, st2):
        c = _linearize(problem, traj, i)
        return c.lval + s2 * c.b2 / c.sigma3 + _mark_sum((c.lam - 1.0) * st2, nu2)

    br = solve_backward(_full(problem.Phi(xT), xT.shape), gen_r, base, bundle, degree=degree, name="r")

    # cost adjoint: m
    def gen_m(i, m, n1, n2, nt1, nt2):
        c = _linearize(problem, traj, i)
        return (c.gam * c.ld[0] + h[:, i] * c.gd[0] + m * c.b1x + n1 * c.s1x + n2 * c.s2x
                + br.z2[:, i] * c.bt2x + _mark_sum(c.f1x * nt1, nu1) + _mark_sum(c.f2x * nt2, nu2)
                + _mark_sum(c.f4x * br.zt2[:, i], nu2))

    bm = solve_backward(gamT * Phix + h[:, -1] * phix, gen_m, with_h, bundle, degree=degree, name="m")

    # cross adjoint: alpha
    def gen_alpha(i, a, b1, b2, bt1, bt2):
        c = _linearize(problem, traj, i)
        lx, ly, lz1, lz2, lzeta1, lzeta2 = c.ld
        pi = p[:, i]
        lam1 = c.lam - 1.0
        return (lx + ly * pi + lz1 * k11[:, i] + lz2 * k12[:, i]
                + lzeta1 * _mark_sum(c.w1 * k21[:, i], nu1) + lzeta2 * _mark_sum(c.w2 * k22[:, i], nu2)
                + c.s1x * b1 + c.s2x * b2 + br.z2[:, i] * c.b2x / c.sigma3
                + c.b1x * a + c.s2x * c.b2 / c.sigma3 * a + c.b2 / c.sigma3 * b2
                + _mark_sum(c.f1x * bt1, nu1)
                + _mark_sum(c.lamx * br.zt2[:, i] + (lam1 + c.f2x * lam1 + c.f2x) * bt2, nu2)
                + _mark_sum(c.f2x * lam1, nu2) * a)

    ba = solve_backward(Phix, gen_alpha, base, bundle, degree=degree, name="alpha")

    # second order: P
    def gen_P(i, P, Q1, Q2, Qt1, Qt2):
        c = _linearize(problem, traj, i, second=True)
        pi, hi, mi, ai = p[:, i], h[:, i], bm.y[:, i], ba.y[:, i]
        psi = (np.ones(n_paths), pi, k11[:, i], k12[:, i],
               _mark_sum(c.w1 * k21[:, i], nu1), _mark_sum(c.w2 * k22[:, i], nu2))
        d2l = _dir2(c.lfun, c.args, psi)
        d2g = _dir2(c.gfun, c.args, psi)
        out = (c.gam * d2l + br.z2[:, i] * c.bt2xx + 2 * c.s2x * c.bt2x * ai + hi * d2g
               + mi * c.b1xx + 2 * c.bt2x * ba.z2[:, i] + 2 * c.b1x * P)
        for sx, sxx, nn, QQ in ((c.s1x, c.s1xx, bm.z1[:, i], Q1), (c.s2x, c.s2xx, bm.z2[:, i], Q2)):
            out = out + nn * sxx + 2 * sx * QQ + sx ** 2 * P
        for fx, fxx, nt, Qt, nu in ((c.f1x, c.f1xx, bm.zt1[:, i], Qt1, nu1),
                                    (c.f2x, c.f2xx, bm.zt2[:, i], Qt2, nu2)):
            out = out + _mark_sum(fxx * nt + (2 * fx + fx ** 2) * Qt + fx ** 2 * P[:, None], nu)
        out = out + _mark_sum(c.f4xx * br.zt2[:, i] + (2 * c.f4x + 2 * c.f2x * c.f4x) * ba.zt2[:, i]
                              + 2 * c.f2x * c.f4x * ai[:, None], nu2)
        return out

    bP = solve_backward(h[:, -1] * phixx + gamT * Phixx, gen_P, with_h, bundle, degree=degree, name="P")

    return AdjointBundle(p, bp.z1, bp.z2, bp.zt1, bp.zt2, h,
                         bm.y, bm.z1, bm.z2, bm.zt1, bm.zt2,
                         br.y, br.z1, br.z2, br.zt1, br.zt2,
                         ba.y, ba.z1, ba.z2, ba.zt1, ba.zt2,
                         bP.y, bP.z1, bP.z2, bP.zt1, bP.zt2,
                         k11, k12, k21, k22, bp.proj_se)


# Hamiltonian


def hamiltonian_difference(problem, traj, adj, i, test_u):
    """Path-wise H(test_u) - H(u_bar) at node ``i``.

    The generator and running cost see the shifted arguments
    ``z_bar + p (sigma(u) - sigma(u_bar))``.
    """
    c = _linearize(problem, traj, i)
    t, x, ub = c.t, c.x, c.u
    shape = x.shape
    ut = _full(test_u, shape)
    _, y, z1, z2, zeta1, zeta2 = c.args
    pi, hi, Pi, mi, ai = adj.p[:, i], adj.h[:, i], adj.P[:, i], adj.m[:, i], adj.alpha[:, i]
    n1, n2, s2 = adj.n1[:, i], adj.n2[:, i], adj.s2[:, i]
    gz1, gz2 = c.gd[2], c.gd[3]
    lz1, lz2 = c.ld[2], c.ld[3]
    sb1 = _full(problem.sigma1(t, x, ub), shape)
    sb2 = _full(problem.sigma2(t, x, ub), shape)
    b2b = _full(problem.obs_drift(t, x, ub), shape)

    def H(uu):
        s1u = _full(problem.sigma1(t, x, uu), shape)
        s2u = _full(problem.sigma2(t, x, uu), shape)
        b2u = _full(problem.obs_drift(t, x, uu), shape)
        zz1 = z1 + pi * (s1u - sb1)
        zz2 = z2 + pi * (s2u - sb2)
        val = (-(c.gam * lz1 + hi * gz1) * pi + n1) * s1u + (-(c.gam * lz2 + hi * gz2) * pi + n2) * s2u
        val = val + 0.5 * (s1u ** 2 + s2u ** 2) * Pi - (s1u * sb1 + s2u * sb2) * Pi
        val = val + hi * _full(problem.g(t, x, y, zz1, zz2, zeta1, zeta2, uu), shape)
        val = val + c.gam * _full(problem.l(t, x, y, zz1, zz2, zeta1, zeta2, uu), shape)
        val = val + mi * problem.drift_tilde(t, x, uu) + s2 * c.gam * b2u / c.sigma3
        val = val + (s2u - sb2) * c.gam * (b2u - b2b) / c.sigma3 * ai
        return val

    return H(ut) - H(ub)


def observation_path(problem, bundle):
    """Observation paths Y_t = int sigma3 dW2 + sum of f3 over second-measure events (reference measure)."""
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    s3 = np.array([problem.sigma3(t) for t in grid.nodes[:-1]], dtype=float)
    inc = bundle.dw2 * s3
    if problem.ms2.size and problem.f3 is not None:
        jumps = np.stack([_full(problem.f3(t, problem.ms2.marks), (problem.ms2.size,))
                          for t in grid.nodes[:-1]])
        inc = inc + np.einsum("pik,ik->pi", bundle.counts2(), jumps)
    out = np.zeros((n_paths, n + 1))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


@dataclass
class GapEstimate:
    node: int
    test_u: float
    edges: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    count: np.ndarray

    @property
    def min_z(self):
        """Smallest gap in units of its standard error (zero gaps count as 0)."""
        z = np.where(self.se > 0, self.mean / np.where(self.se > 0, self.se, 1.0), 0.0)
        z = np.where((self.se == 0) & (self.mean < 0), -np.inf, z)
        return float(z.min())

    def passes(self, k=3.0):
        return bool(np.all(self.mean >= -k * self.se))


def observation_bins(values, n_bins):
    """Quantile bin index per path; ties collapse bins so none is empty."""
    v = np.asarray(values, dtype=float)
    edges = np.quantile(v, np.linspace(0, 1, n_bins + 1), method="inverted_cdf")
    interior = np.unique(edges[1:-1])
    idx = np.searchsorted(interior, v, side="right")
    used = np.unique(idx)
    remap = np.full(interior.size + 1, -1)
    remap[used] = np.arange(used.size)
    return remap[idx], interior


def hamiltonian_gap(problem, traj, adj, test_u, node, n_bins=10, obs=None):
    """Observation-binned estimate of E[H(test_u) - H(u_bar) | Y] at a grid node."""
    if node < 0 or node >= traj.grid.n_steps:
        raise InvalidArgument("node must index a grid step")
    if obs is None:
        obs = observation_path(problem, traj.bundle)
    d = hamiltonian_difference(problem, traj, adj, node, test_u)
    idx, edges = observation_bins(obs[:, node], n_bins)
    nb = idx.max() + 1
    count = np.bincount(idx, minlength=nb)
    if count.min() < 2:
        raise InsufficientPaths(f"conditioning bin with {count.min()} paths at node {node}")
    s = np.bincount(idx, weights=d, minlength=nb)
    s2 = np.bincount(idx, weights=d * d, minlength=nb)
    mean = s / count
    var = np.maximum(s2 - count * mean ** 2, 0.0) / (count - 1)
    return GapEstimate(int(node), float(test_u), edges, mean, np.sqrt(var / count), count)


# variational equations


@dataclass
class FirstOrderPaths:
    x1: np.ndarray
    x2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    x_eps: np.ndarray
    u_eps: np.ndarray
    window: np.ndarray


def simulate_first_order(problem, forward, control, bundle, spec, log_gamma=None):
    """First and second order state variations plus the perturbed state on the same drivers.

    The Euler scheme mirrors ``simulate_forward``: the continuous step first,
    then events in time order with coefficients taken at the reference left limits.
    """
    check_marks(problem, bundle)
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    if not isinstance(forward, ForwardPaths) or forward.x_left is None:
        raise InvalidArgument("reference paths must carry left limits (record_left=True)")
    xb, xl_all = forward.x, forward.x_left
    ub = np.array(control_array(control, n_paths, n))
    ue = build_spike_control(ub, spec, bundle)
    window = spike_window(grid, spec)
    x_eps = simulate_forward(problem, ue, bundle).x
    if log_gamma is None:
        log_gamma = simulate_gamma_tilde(problem, ub, forward, bundle).log_values
    k1 = problem.ms1.size
    nu1, nu2 = problem.ms1.weights, problem.ms2.weights

    x1 = np.zeros((n_paths, n + 1))
    x2 = np.zeros((n_paths, n + 1))
    g1 = np.zeros((n_paths, n + 1))
    g2 = np.zeros((n_paths, n + 1))
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        x, u, uu = xb[:, i], ub[:, i], ue[:, i]
        D = lambda xx, v=u: full_drift(problem, t, xx, v)
        S1 = lambda xx, v=u: _full(problem.sigma1(t, xx, v), np.shape(xx))
        S2 = lambda xx, v=u: _full(problem.sigma2(t, xx, v), np.shape(xx))
        TH = lambda xx, v=u: problem.obs_drift(t, xx, v) / problem.sigma3(t)
        a, b = x1[:, i], x2[:, i]
        dD = D(x, uu) - D(x, u)
        Dx, Dxx = fd1(D, (x,), 0), fd2(D, (x,), 0, 0)
        na = a + Dx * a * dt
        nb = b + (Dx * b + 0.5 * Dxx * a * a + dD) * dt
        for S, dw in ((S1, bundle.dw1[:, i]), (S2, bundle.dw2[:, i])):
            sx, sxx = fd1(S, (x,), 0), fd2(S, (x,), 0, 0)
            dsx = fd1(lambda xx: S(xx, uu), (x,), 0) - sx
            ds = S(x, uu) - S(x, u)
            na = na + (sx * a + ds) * dw
            nb = nb + (sx * b + 0.5 * sxx * a * a + dsx * a) * dw
        # density variations, Euler with node values
        G = np.exp(log_gamma[:, i])
        th = TH(x)
        thx, thxx = fd1(TH, (x,), 0), fd2(TH, (x,), 0, 0)
        dth = TH(x, uu) - th
        dthx = fd1(lambda xx: TH(xx, uu), (x,), 0) - thx
        ga, gb = g1[:, i], g2[:, i]
        dw2 = bundle.dw2[:, i]
        nga = ga + (ga * th + G * (thx * a + dth)) * dw2
        ngb = gb + (gb * th + ga * (thx * a + dth) + G * (thx * b + 0.5 * thxx * a * a + dthx * a)) * dw2
        if problem.ms2.size:
            lam = problem.tilt(t, x)
            lamf = lambda xx: _lam_raw(problem, t, xx)
            lx, lxx = fd1(lamf, (x,), 0), fd2(lamf, (x,), 0, 0)
            nga = nga - ((ga[:, None] * (lam - 1) + G[:, None] * lx * a[:, None]) @ nu2) * dt
            ngb = ngb - ((gb[:, None] * (lam - 1) + ga[:, None] * lx * a[:, None]
                          + G[:, None] * (lx * b[:, None] + 0.5 * lxx * (a * a)[:, None])) @ nu2) * dt
        for s in range(bundle.n_slots):
            code = bundle.slots[:, i, s]
            idx = np.nonzero(code >= 0)[0]
            if idx.size == 0:
                continue
            cc = code[idx].astype(np.int64)
            xl = xl_all[idx, i, s]
            ui = u[idx]
            fx = np.zeros(idx.size)
            fxx = np.zeros(idx.size)
            m1 = cc < k1
            rows = np.arange(idx.size)
            if np.any(m1):
                F = lambda xx: problem.jump1(t, xx, ui[m1])
                fx[m1] = fd1(F, (xl[m1],), 0)[rows[:m1.sum()], cc[m1]]
                fxx[m1] = fd2(F, (xl[m1],), 0, 0)[rows[:m1.sum()], cc[m1]]
            m2 = ~m1
            if np.any(m2):
                F = lambda xx: problem.jump2(t, xx, ui[m2])
                fx[m2] = fd1(F, (xl[m2],), 0)[rows[:m2.sum()], cc[m2] - k1]
                fxx[m2] = fd2(F, (xl[m2],), 0, 0)[rows[:m2.sum()], cc[m2] - k1]
                j2 = idx[m2]
                lam = _lam_raw(problem, t, xl[m2])[rows[:m2.sum()], cc[m2] - k1]
                lamf = lambda xx: _lam_raw(problem, t, xx)
                lx = fd1(lamf, (xl[m2],), 0)[rows[:m2.sum()], cc[m2] - k1]
                lxx = fd2(lamf, (xl[m2],), 0, 0)[rows[:m2.sum()], cc[m2] - k1]
                Gl = G[j2]
                al, bl, gal, gbl = na[j2], nb[j2], nga[j2], ngb[j2]
                nga[j2] = gal + gal * (lam - 1) + Gl * lx * al
                ngb[j2] = gbl + gbl * (lam - 1) + gal * lx * al + Gl * (lx * bl + 0.5 * lxx * al * al)
            al, bl = na[idx], nb[idx]
            nb[idx] = bl + fx * bl + 0.5 * fxx * al * al
            na[idx] = al + fx * al
        x1[:, i + 1], x2[:, i + 1] = na, nb
        g1[:, i + 1], g2[:, i + 1] = nga, ngb
    return FirstOrderPaths(x1, x2, g1, g2, x_eps, ue, window)


@dataclass
class VariationPaths:
    x1: np.ndarray
    x2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    y1: np.ndarray
    z11: np.ndarray
    z21: np.ndarray
    zt11: np.ndarray
    zt21: np.ndarray
    y1_bsde: np.ndarray
    zt11_bsde: np.ndarray
    zt21_bsde: np.ndarray
    relation_residual: float
    error_estimate: float
    intercepts: list
    u_eps: np.ndarray
    window: np.ndarray


def simulate_variations(problem, traj, adj, spec, degree=2, n_batches=10):
    """Variational paths with backward parts built from the adjoint relations.

    ``y1 = p x1``, ``z^{i,1} = k1^i x1 + p dsigma_i`` and ``zt^{i,1} = k2^i x1_-``.
    The first-order backward equation is also solved independently by
    regression on ``(x_bar, x1)``; the report carries the residual against the
    relation, an error scale for it, and batch-means intercept tests for the
    jump parts.
    """
    bundle, grid = traj.bundle, traj.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    fwd = ForwardPaths(traj.x, traj.x_left)
    fo = simulate_first_order(problem, fwd, traj.u, bundle, spec, log_gamma=traj.log_gamma)
    x1 = fo.x1
    ue = fo.u_eps
    nu1, nu2 = problem.ms1.weights, problem.ms2.weights

    ds1 = np.zeros((n_paths, n))
    ds2 = np.zeros((n_paths, n))
    for i in np.nonzero(fo.window)[0]:
        t, x, u = grid.nodes[i], traj.x[:, i], traj.u[:, i]
        ds1[:, i] = _full(problem.sigma1(t, x, ue[:, i]), x.shape) - _full(problem.sigma1(t, x, u), x.shape)
        ds2[:, i] = _full(problem.sigma2(t, x, ue[:, i]), x.shape) - _full(problem.sigma2(t, x, u), x.shape)
    y1 = adj.p * x1
    z11 = adj.k11 * x1[:, :-1] + adj.p[:, :-1] * ds1
    z21 = adj.k12 * x1[:, :-1] + adj.p[:, :-1] * ds2
    zt11 = adj.k21 * x1[:, :-1, None]
    zt21 = adj.k22 * x1[:, :-1, None]

    # independent route: the linearised backward equation by regression
    phix = fd1(lambda v: _full(problem.phi(v), np.shape(v)), (traj.x[:, -1],), 0)
    gd = np.empty((6, n_paths, n))
    w1 = np.empty((n, problem.ms1.size))
    w2 = np.empty((n, problem.ms2.size))
    for i in range(n):
        c = _linearize(problem, traj, i)
        gd[:, :, i] = c.gd
        w1[i], w2[i] = c.w1, c.w2
    feats = _stack_features(traj.features, x1)

    def solve_y1(idx):
        def gen(i, y, z1, z2, zt1, zt2):
            gx, gy, gz1, gz2, gzeta1, gzeta2 = gd[:, idx, i]
            pi, a1, a2 = adj.p[idx, i], ds1[idx, i], ds2[idx, i]
            return (gx * x1[idx, i] + gy * y + gz1 * (z1 - pi * a1) + gz2 * (z2 - pi * a2)
                    + gzeta1 * _mark_sum(w1[i] * zt1, nu1) + gzeta2 * _mark_sum(w2[i] * zt2, nu2)
                    - adj.q1[idx, i] * a1 - adj.q2[idx, i] * a2)

        return solve_backward((phix * x1[:, -1])[idx], gen, feats[idx], bundle.subset(idx),
                              degree=degree, name="first-order variation", keep_yhat=True)

    everything = np.arange(n_paths)
    b1 = solve_y1(everything)
    resid = float(np.max(np.mean(np.abs(b1.y - y1), axis=0)))
    scale = float(np.max(np.mean(np.abs(y1), axis=0)))
    x1_scale = float(np.max(np.mean(np.abs(x1), axis=0)))
    reg = float(np.sqrt(np.sum(b1.proj_se ** 2)))
    if adj.p_proj_se is not None:
        reg += x1_scale * float(np.sqrt(np.sum(adj.p_proj_se ** 2)))
    err = float(np.max(grid.dt)) * scale + reg

    # Intercept test by batch means: the backward equation is re-solved on disjoint
    # path batches, so the spread of the batch intercepts includes the regression error.
    # Responses M dNc_k / (nu_k dt) with M = Y_{i+1} - E[Y_{i+1} | F_i] are
    # conditionally unbiased for zt_k.
    steps = np.nonzero(fo.window)[0]
    dns = (bundle.compensated1(), bundle.compensated2())
    keys = [(j, k) for j, nu in ((1, nu1), (2, nu2)) for k in range(nu.size) if nu[k] > 0]
    per_batch = {key: [] for key in keys}
    if steps.size and keys:
        for idx in np.array_split(everything, n_batches):
            bb = solve_y1(idx)
            m = bb.y[:, steps + 1] - bb.yhat[:, steps]
            for j, k in keys:
                nu = nu1 if j == 1 else nu2
                k2 = adj.k21 if j == 1 else adj.k22
                resp = m * dns[j - 1][idx][:, steps, k] / (nu[k] * grid.dt[steps])
                per_batch[(j, k)].append(_ols_intercept(resp, k2[idx][:, steps, k] * x1[idx][:, steps]))
    intercepts = []
    for (j, k), vals in per_batch.items():
        if not vals:
            continue
        vals = np.asarray(vals)
        a = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(vals.size))
        intercepts.append({"measure": j, "mark": k, "intercept": a, "se": se,
                           "z": a / se if se > 0 else 0.0})
    return VariationPaths(x1, fo.x2, fo.gamma1, fo.gamma2, y1, z11, z21, zt11, zt21,
                          b1.y, b1.zt1, b1.zt2, resid, err, intercepts, ue, fo.window)


def _ols_intercept(resp, reg):
    X = np.column_stack([np.ones(resp.size), reg.ravel()])
    return float(np.linalg.lstsq(X, resp.ravel(), rcond=None)[0][0])


# order estimates


@dataclass
class VariationOrder:
    eps: np.ndarray
    norms: dict
    slopes: dict

    def slope(self, name):
        return self.slopes[name]["slope"]


def _loglog_slope(eps, mean, se, floor=0.0):
    mean, se = np.asarray(mean), np.asarray(se)
    below = bool(np.any(mean <= floor) or np.any(mean < 3 * se))
    if np.any(mean <= floor):
        return {"slope": float("nan"), "se": float("nan"), "below_noise_floor": True, "undefined": True}
    X = np.column_stack([np.ones(eps.size), np.log(eps)])
    rel = np.where(se > 0, se / mean, 0.0)
    w = 1.0 / np.maximum(rel, 1e-12) ** 2
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ np.log(mean))
    return {"slope": float(coef[1]), "se": float(np.sqrt(cov[1, 1])),
            "below_noise_floor": below, "undefined": False}


def _sup_moment(v, beta):
    s = np.max(np.abs(v), axis=1) ** beta
    se = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else float("nan")
    return float(s.mean()), se


def estimate_variation_order(problem, base_control, bundle, eps_list, t_bar, u, beta=2.0):
    """Log-log slopes in the spike width of sup-moments of the variations and remainders.

    Tracked quantities: ``x1``, ``x2``, ``rem1 = x_eps - x_bar - x1``,
    ``rem2 = rem1 - x2``, ``gamma1`` and ``gamma2``.
    """
    if beta < 2:
        raise InvalidArgument("beta must be >= 2")
    eps = np.asarray(eps_list, dtype=float)
    if eps.size < 2 or np.any(np.diff(eps) >= 0):
        raise InvalidArgument("spike widths must be strictly decreasing")
    grid = bundle.grid
    if np.any(eps < 2 * np.max(grid.dt) * (1 - 1e-9)):
        raise InvalidArgument("each spike width must span at least two grid steps")
    fwd = simulate_forward(problem, base_control, bundle, record_left=True)
    lg = simulate_gamma_tilde(problem, base_control, fwd, bundle).log_values
    names = ("x1", "x2", "rem1", "rem2", "gamma1", "gamma2")
    norms = {k: [] for k in names}
    for e in eps:
        fo = simulate_first_order(problem, fwd, base_control, bundle, SpikeSpec(t_bar, e, u), log_gamma=lg)
        rem1 = fo.x_eps - fwd.x - fo.x1
        for k, v in zip(names, (fo.x1, fo.x2, rem1, rem1 - fo.x2, fo.gamma1, fo.gamma2)):
            norms[k].append(_sup_moment(v, beta))
    norms = {k: np.array(v) for k, v in norms.items()}
    # round-off floor relative to the size of the reference state
    floor = 1e-12 * _sup_moment(fwd.x, beta)[0]
    slopes = {k: _loglog_slope(eps, v[:, 0], v[:, 1], floor) for k, v in norms.items()}
    return VariationOrder(eps, norms, slopes)
