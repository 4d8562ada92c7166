"""Partially observed linear-quadratic problem with jumps.

State (reference measure, after the observation drift is removed)::

    dx = (b11 x + b12 u + b13) dt + (s11 x + s12 u + s13) dW1 + (s21 x + s22 u + s23) dW2
         + int (f11 x- + f12) dN1c + int (f21 x- + f22) dN2c
    -dy = (g11 x + g12 y + g13 z1 + g14 z2 + int g15 zt1 nu1 + int g16 zt2 nu2 + g17 u + g18) dt
          - z1 dW1 - z2 dW2 - int zt1 dN1c - int zt2 dN2c,     y_T = phi11 x_T + phi12

with observation drift ``b22``, noise ``sigma3``, jump sizes ``f3`` and tilt
``lam11``.  The cost is ``E int G l11 u^2 dt + y0^2`` over controls with
values in ``U = (-inf, -1] u [1, inf)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from .adjoint import SpikeSpec, build_spike_control
from .errors import CoefficientError, InvalidArgument, InvalidTilt, SingularInitialization
from .fbsdep import control_array, simulate_forward
from .girsanov import simulate_gamma_tilde
from .problem import TILT_MESSAGE, FbsdepProblem
from .randmeasures import MarkSpace, make_time_grid, sample_driver_bundle

SCALAR_FIELDS = ("b11", "b12", "b13", "s11", "s12", "s13", "s21", "s22", "s23",
                 "g11", "g12", "g13", "g14", "g17", "g18", "b22", "sigma3", "l11")
MARK1_FIELDS = ("f11", "f12", "g15")
MARK2_FIELDS = ("f21", "f22", "g16", "f3", "lam11")


def _as_time_function(v, size=None):
    if callable(v):
        return v
    arr = np.asarray(v, dtype=float)
    if size is not None:
        arr = np.broadcast_to(arr, (size,)).copy()
    else:
        arr = float(arr)
    return lambda t, a=arr: a


def _zero(t):
    return 0.0


def _one(t):
    return 1.0


@dataclass(frozen=True)
class LqCoefficients:
    ms1: MarkSpace
    ms2: MarkSpace
    b11: Callable = _zero
    b12: Callable = _zero
    b13: Callable = _zero
    s11: Callable = _zero
    s12: Callable = _zero
    s13: Callable = _zero
    s21: Callable = _zero
    s22: Callable = _zero
    s23: Callable = _zero
    g11: Callable = _zero
    g12: Callable = _zero
    g13: Callable = _zero
    g14: Callable = _zero
    g17: Callable = _zero
    g18: Callable = _zero
    b22: Callable = _zero
    sigma3: Callable = _one
    l11: Callable = _one
    f11: Optional[Callable] = None
    f12: Optional[Callable] = None
    g15: Optional[Callable] = None
    f21: Optional[Callable] = None
    f22: Optional[Callable] = None
    g16: Optional[Callable] = None
    f3: Optional[Callable] = None
    lam11: Optional[Callable] = None
    phi11: float = 0.0
    phi12: float = 0.0
    x0: float = 0.0
    tilt_floor: float = 1e-6

    @classmethod
    def from_values(cls, ms1, ms2, **values):
        """Build from constants, per-mark arrays or callables of ``t``."""
        kw = {}
        for name, v in values.items():
            if name in SCALAR_FIELDS:
                kw[name] = _as_time_function(v)
            elif name in MARK1_FIELDS:
                kw[name] = _as_time_function(v, ms1.size)
            elif name in MARK2_FIELDS:
                kw[name] = _as_time_function(v, ms2.size)
            elif name in ("phi11", "phi12", "x0", "tilt_floor"):
                kw[name] = float(v)
            else:
                raise InvalidArgument(f"unknown LQ coefficient {name!r}")
        return cls(ms1, ms2, **kw)

    def _mark(self, name, t, size, default=0.0):
        f = getattr(self, name)
        if f is None:
            return np.full(size, default)
        return np.broadcast_to(np.asarray(f(t), dtype=float), (size,))

    def at(self, t):
        """All coefficient values at time ``t``."""
        c = SimpleNamespace(**{k: float(getattr(self, k)(t)) for k in SCALAR_FIELDS})
        k1, k2 = self.ms1.size, self.ms2.size
        for k in MARK1_FIELDS:
            setattr(c, k, self._mark(k, t, k1))
        for k in ("f21", "f22", "g16", "f3"):
            setattr(c, k, self._mark(k, t, k2))
        c.lam11 = self._mark("lam11", t, k2, default=1.0)
        c.nu1, c.nu2 = self.ms1.weights, self.ms2.weights
        return c

    def tilde(self, t):
        """Reference-measure drift coefficients (bt11, bt12, bt13)."""
        c = self.at(t)
        lam1 = c.lam11 - 1.0
        bt11 = c.b11 - c.b22 * c.s21 / c.sigma3 - (lam1 * c.f21) @ c.nu2
        bt12 = c.b12 - c.b22 * c.s22 / c.sigma3
        bt13 = c.b13 - c.b22 * c.s23 / c.sigma3 - (lam1 * c.f22) @ c.nu2
        return bt11, bt12, bt13

    def check(self, grid):
        for j, t in enumerate(grid.nodes):
            c = self.at(t)
            vals = [getattr(c, k) for k in SCALAR_FIELDS] + [getattr(c, k) for k in MARK1_FIELDS + MARK2_FIELDS]
            if not all(np.all(np.isfinite(v)) for v in vals):
                raise CoefficientError("non-finite LQ coefficient", node=j)
            if c.l11 <= 0:
                raise InvalidArgument(f"l11 must be positive (node {j})")
            if c.sigma3 == 0:
                raise InvalidArgument(f"sigma3 must be nonzero (node {j})")
            if self.f3 is not None and np.any(c.f3 == 0):
                raise InvalidArgument(f"f3 must be nonzero (node {j})")
            if np.any(c.lam11 < self.tilt_floor) or np.any(c.lam11 > 1.0):
                raise InvalidTilt(TILT_MESSAGE)

    def to_problem(self):
        """The same system as a general ``FbsdepProblem`` (cost l = l11 u^2, Gamma(y) = y^2)."""
        A = self.at

        def lin(a, b, c):
            return lambda t, x, u: getattr(A(t), a) * x + getattr(A(t), b) * u + getattr(A(t), c)

        def jump(a, b):
            return lambda t, x, u, e: getattr(A(t), a) * x + getattr(A(t), b)

        def g(t, x, y, z1, z2, zeta1, zeta2, u):
            c = A(t)
            return (c.g11 * x + c.g12 * y + c.g13 * z1 + c.g14 * z2 + zeta1 + zeta2
                    + c.g17 * u + c.g18)

        def l(t, x, y, z1, z2, zeta1, zeta2, u):
            return A(t).l11 * u ** 2

        return FbsdepProblem(
            b1=lin("b11", "b12", "b13"), sigma1=lin("s11", "s12", "s13"), sigma2=lin("s21", "s22", "s23"),
            f1=jump("f11", "f12"), f2=jump("f21", "f22"), g=g,
            phi=lambda x: self.phi11 * np.asarray(x, dtype=float) + self.phi12,
            b2=lambda t, x, u: np.full(np.broadcast(x, u).shape, A(t).b22),
            sigma3=lambda t: A(t).sigma3,
            f3=lambda t, e: A(t).f3,
            lam=lambda t, x, e: np.broadcast_to(A(t).lam11, np.broadcast(x, e).shape),
            l=l, Gamma=lambda y: np.asarray(y, dtype=float) ** 2,
            x0=self.x0, ms1=self.ms1, ms2=self.ms2,
            zeta_weights1=lambda t: A(t).g15, zeta_weights2=lambda t: A(t).g16,
            tilt_floor=self.tilt_floor,
        )


def in_U(u):
    return np.abs(np.asarray(u, dtype=float)) >= 1.0


def project_to_U(mu):
    """Case split of the candidate control: mu if |mu| >= 1, 1 on [0, 1), -1 on (-1, 0)."""
    mu = np.asarray(mu, dtype=float)
    return np.where(np.abs(mu) >= 1.0, mu, np.where(mu >= 0.0, 1.0, -1.0))


# Riccati system


@dataclass
class RiccatiBundle:
    times: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    pi3: np.ndarray
    eta: np.ndarray
    # gain without the density factor: L = gain / G
    gain: np.ndarray

    def y0_hat(self, x0):
        den = 1.0 - 2.0 * self.pi3[0]
        if abs(den) < 1e-12:
            raise SingularInitialization("1 - 2 pi3(0) vanishes")
        return (self.pi1[0] * x0 + self.eta[0]) / den


def _riccati_rhs(coeffs, t, v):
    c = coeffs.at(t)
    bt11, bt12, bt13 = coeffs.tilde(t)
    p1, p2, p3, eta = v
    br1 = (c.g12 + c.b11 - c.b22 * c.s21 / c.sigma3 + ((c.g16 - c.lam11 + 1.0) * c.f21) @ c.nu2
           + c.s11 * c.g13 + c.s21 * c.g14 + (c.f11 * c.g15) @ c.nu1)
    br2 = (bt11 + c.g13 * c.s11 + c.g14 * c.s21 + (c.g15 * c.f11) @ c.nu1
           + (c.g16 * c.f21) @ c.nu2 + c.g12)
    gain = (c.s12 * p1 * c.g13 + c.s22 * p1 * c.g14 + c.g17 + bt12 * p1) / c.l11
    br3 = 2 * c.g12 + c.g13 ** 2 + c.g14 ** 2 + (c.g15 ** 2) @ c.nu1 + (c.g16 ** 2) @ c.nu2
    br_eta = bt13 + c.g13 * c.s13 + c.g14 * c.s23 + (c.g15 * c.f12) @ c.nu1 + (c.g16 * c.f22) @ c.nu2
    return np.array([
        -br1 * p1 - c.g11,
        -br2 * p2 - c.g11,
        -br3 * p3 + 0.5 * (bt12 + c.g13 * c.s12 + c.g14 * c.s22) * gain * p2 + 0.5 * c.g17 * gain,
        -c.g12 * eta - br_eta * p2 - c.g18,
    ])


def feedback_gain(coeffs, t, pi1):
    c = coeffs.at(t)
    bt12 = coeffs.tilde(t)[1]
    return (c.s12 * pi1 * c.g13 + c.s22 * pi1 * c.g14 + c.g17 + bt12 * pi1) / c.l11


def solve_riccati_system(coeffs, grid):
    """Integrate the four coupled scalar ODEs backward from T with RK4 on the grid."""
    nodes = grid.nodes
    n = nodes.size - 1
    out = np.empty((n + 1, 4))
    out[n] = [coeffs.phi11, coeffs.phi11, 0.0, coeffs.phi12]

    def rhs(t, v, j):
        d = _riccati_rhs(coeffs, t, v)
        if not np.all(np.isfinite(d)):
            raise CoefficientError("non-finite Riccati right-hand side", node=j)
        return d

    for j in range(n, 0, -1):
        t, h = nodes[j], nodes[j - 1] - nodes[j]
        v = out[j]
        k1 = rhs(t, v, j)
        k2 = rhs(t + h / 2, v + h / 2 * k1, j)
        k3 = rhs(t + h / 2, v + h / 2 * k2, j)
        k4 = rhs(t + h, v + h * k3, j - 1)
        out[j - 1] = v + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    gain = np.array([feedback_gain(coeffs, t, p) for t, p in zip(nodes, out[:, 0])])
    return RiccatiBundle(nodes.copy(), out[:, 0], out[:, 1], out[:, 2], out[:, 3], gain)


# filter and feedback


def lq_feedback_control(coeffs, riccati, hhat, gamma_tilde):
    """Projected feedback: mu = -gain hhat / (2 G), then the case split onto U.

    ``hhat`` and ``gamma_tilde`` are values at the step start nodes, shape (N, n).
    Returns ``(u_bar, mu)``.
    """
    hhat = np.asarray(hhat, dtype=float)
    gam = np.asarray(gamma_tilde, dtype=float)
    n = hhat.shape[-1]
    mu = -0.5 * riccati.gain[:n] * hhat / gam
    return project_to_U(mu), mu


@dataclass
class FilterState:
    x_hat: np.ndarray
    y_hat: np.ndarray
    h_hat: np.ndarray
    z2_hat: np.ndarray
    zt2_hat: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    log_gamma: np.ndarray


def _lq_obs_log_gamma_step(c, dw2, counts2, dt):
    theta = c.b22 / c.sigma3
    inc = theta * dw2 - 0.5 * theta ** 2 * dt - ((c.lam11 - 1.0) @ c.nu2) * dt
    if counts2.shape[-1]:
        inc = inc + counts2 @ np.log(c.lam11)
    return inc


def simulate_filter_fbsdfe(coeffs, riccati, bundle, control=None, h0=None):
    """Forward filtering equations driven by the observation noise, with feedback ``u_bar``.

    ``hhat`` follows a Milstein step in the Brownian part and the exact factor
    ``(1 + g16)`` at each observation jump.  ``x_hat`` is driven by the control
    actually applied (``control`` if given, otherwise the projected feedback).
    ``h0`` overrides the initial value ``2 y0_hat`` (diagnostics only).
    """
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    y0 = riccati.y0_hat(coeffs.x0)
    counts2 = bundle.counts2()
    x = np.empty((n_paths, n + 1))
    h = np.empty((n_paths, n + 1))
    lg = np.zeros((n_paths, n + 1))
    x[:, 0] = coeffs.x0
    h[:, 0] = 2.0 * y0 if h0 is None else h0
    u = np.empty((n_paths, n))
    mu = np.empty((n_paths, n))
    z2 = np.empty((n_paths, n))
    zt2 = np.empty((n_paths, n, coeffs.ms2.size))
    given = None if control is None else control_array(control, n_paths, n)
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        c = coeffs.at(t)
        bt11, bt12, bt13 = coeffs.tilde(t)
        gam = np.exp(lg[:, i])
        mu[:, i] = -0.5 * riccati.gain[i] * h[:, i] / gam
        u[:, i] = project_to_U(mu[:, i]) if given is None else given[:, i]
        dw = bundle.dw2[:, i]
        cnt = counts2[:, i]
        xi, hi, ui = x[:, i], h[:, i], u[:, i]
        p2, p3 = riccati.pi2[i], riccati.pi3[i]
        z2[:, i] = c.s21 * p2 * xi + p2 * c.s22 * ui + c.s23 * p2 + p3 * c.g14 * hi
        zt2[:, i] = p2 * c.f21 * xi[:, None] + c.f22 * p2 + c.g16 * p3 * hi[:, None]
        xn = xi + (bt11 * xi + bt12 * ui + bt13 - (c.f21 * xi[:, None] + c.f22) @ c.nu2) * dt
        xn = xn + (c.s21 * xi + c.s22 * ui + c.s23) * dw
        # events in time order, affine in the left limit
        for s in range(bundle.n_slots):
            code = bundle.slots[:, i, s] - coeffs.ms1.size
            idx = np.nonzero(code >= 0)[0]
            if idx.size:
                k = code[idx]
                xn[idx] = xn[idx] + c.f21[k] * xn[idx] + c.f22[k]
        x[:, i + 1] = xn
        hn = hi * (1.0 + c.g12 * dt + c.g14 * dw + 0.5 * c.g14 ** 2 * (dw * dw - dt)
                   - (c.g16 @ c.nu2) * dt)
        if coeffs.ms2.size:
            hn = hn * np.prod((1.0 + c.g16) ** cnt, axis=1)
        h[:, i + 1] = hn
        lg[:, i + 1] = lg[:, i] + _lq_obs_log_gamma_step(c, dw, cnt, dt)
    y = riccati.pi2 * x + riccati.pi3 * h + riccati.eta
    return FilterState(x, y, h, z2, zt2, u, mu, lg)


def hhat_closed_form(coeffs, bundle, h0):
    """Exponential formula for the filtered cost adjoint."""
    grid = bundle.grid
    counts2 = bundle.counts2()
    n_paths, n = bundle.n_paths, grid.n_steps
    logh = np.zeros((n_paths, n + 1))
    for i in range(n):
        c = coeffs.at(grid.nodes[i])
        inc = (c.g12 - 0.5 * c.g14 ** 2 - c.g16 @ c.nu2) * grid.dt[i] + c.g14 * bundle.dw2[:, i]
        if coeffs.ms2.size:
            inc = inc + counts2[:, i] @ np.log1p(c.g16)
        logh[:, i + 1] = logh[:, i] + inc
    return h0 * np.exp(logh)


def lq_candidate(coeffs, bundle, riccati=None):
    """The projected candidate control on a bundle, with its filter state."""
    if riccati is None:
        riccati = solve_riccati_system(coeffs, bundle.grid)
    fs = simulate_filter_fbsdfe(coeffs, riccati, bundle)
    return fs.u, fs, riccati


# cost


@dataclass
class CostSample:
    """Per-path pieces of the cost: J = mean(running) + mean(dual)^2."""

    running: np.ndarray
    dual: np.ndarray

    @property
    def y0(self):
        return float(self.dual.mean())

    @property
    def J(self):
        return float(self.running.mean() + self.y0 ** 2)

    def influence(self):
        return self.running + 2.0 * self.y0 * self.dual

    @property
    def se(self):
        d = self.influence()
        return float(d.std(ddof=1) / np.sqrt(d.size))


def cost_on_bundle(coeffs, control, bundle, problem=None):
    """Per-path cost pieces on a driver bundle.

    ``y0`` is obtained by duality: with the linear density
    ``dH = H (g12 dt + g13 dW1 + g14 dW2 + int g15 dN1c + int g16 dN2c)``,
    ``y0 = E[H_T (phi11 x_T + phi12) + int H (g11 x + g17 u + g18) dt]``.
    """
    problem = coeffs.to_problem() if problem is None else problem
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    u = np.array(control_array(control, n_paths, n))
    fwd = simulate_forward(problem, u, bundle, record_left=False)
    x = fwd.x
    lg = simulate_gamma_tilde(problem, u, fwd, bundle).log_values
    c1, c2 = bundle.counts1(), bundle.counts2()
    logH = np.zeros(n_paths)
    running = np.zeros(n_paths)
    dual = np.zeros(n_paths)
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        c = coeffs.at(t)
        H = np.exp(logH)
        running += np.exp(lg[:, i]) * c.l11 * u[:, i] ** 2 * dt
        dual += H * (c.g11 * x[:, i] + c.g17 * u[:, i] + c.g18) * dt
        logH = logH + (c.g12 - 0.5 * (c.g13 ** 2 + c.g14 ** 2) - c.g15 @ c.nu1 - c.g16 @ c.nu2) * dt
        logH = logH + c.g13 * bundle.dw1[:, i] + c.g14 * bundle.dw2[:, i]
        if coeffs.ms1.size:
            logH = logH + c1[:, i] @ np.log1p(c.g15)
        if coeffs.ms2.size:
            logH = logH + c2[:, i] @ np.log1p(c.g16)
    dual += np.exp(logH) * (coeffs.phi11 * x[:, -1] + coeffs.phi12)
    return CostSample(running, dual)


def evaluate_cost(coeffs, control, n_paths, seed, grid=None, n_steps=100, threads=1):
    """Monte Carlo cost estimate ``(J, SE)``; ``control`` may be a callable ``bundle -> control``."""
    grid = make_time_grid(1.0, n_steps) if grid is None else grid
    bundle = sample_driver_bundle(grid, coeffs.ms1, coeffs.ms2, n_paths, seed, threads=threads)
    u = control(bundle) if callable(control) else control
    cs = cost_on_bundle(coeffs, u, bundle)
    return cs.J, cs.se


def paired_gap(base, other):
    """``J(other) - J(base)`` on common drivers with its delta-method SE."""
    d = other.influence() - base.influence()
    return other.J - base.J, float(d.std(ddof=1) / np.sqrt(d.size))


# comparators and the optimality report


def default_comparators(T):
    """Twenty admissible comparator rules, each a map ``(u_bar, mu, bundle) -> control``."""
    out = []
    for v in (1.0, -1.0, 1.5, -1.5, 2.0, -2.0):
        out.append((f"const({v:g})", lambda ub, mu, b, v=v: np.full_like(ub, v)))
    for k in (0.5, 1.5, 2.0):
        out.append((f"scaled_feedback({k:g})", lambda ub, mu, b, k=k: project_to_U(k * mu)))
    out.append(("negated", lambda ub, mu, b: -ub))
    out.append(("frozen_initial", lambda ub, mu, b: np.broadcast_to(ub[:, :1], ub.shape).copy()))
    spikes = [(uu, tb * T, 0.1 * T) for tb in (0.25, 0.5) for uu in (2.0, -2.0, 5.0)]
    spikes += [(2.0, 0.0, 0.2 * T), (-1.0, 0.7 * T, 0.1 * T)]
    for uu, tb, e in spikes:
        spec = SpikeSpec(tb, e, uu)
        out.append((f"spike(u={uu:g},t={tb:g},eps={e:g})",
                    lambda ub, mu, b, spec=spec: build_spike_control(ub, spec, b)))

    def delayed(ub, mu, b):
        lag = max(1, int(round(0.1 * T / b.grid.dt[0])))
        out_ = np.empty_like(ub)
        out_[:, lag:] = ub[:, :-lag]
        out_[:, :lag] = ub[:, :1]
        return out_

    out.append(("delayed", delayed))
    return out


@dataclass
class OptimalityReport:
    J_candidate: float
    se_candidate: float
    rows: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r["pass"] for r in self.rows)


def verify_optimality(coeffs, n_paths, seed, grid=None, n_steps=100, comparators=None, threads=1, k=3.0):
    """Candidate cost against the comparator suite on common drivers (paired gaps)."""
    grid = make_time_grid(1.0, n_steps) if grid is None else grid
    coeffs.check(grid)
    bundle = sample_driver_bundle(grid, coeffs.ms1, coeffs.ms2, n_paths, seed, threads=threads)
    riccati = solve_riccati_system(coeffs, grid)
    fs = simulate_filter_fbsdfe(coeffs, riccati, bundle)
    problem = coeffs.to_problem()
    base = cost_on_bundle(coeffs, fs.u, bundle, problem)
    report = OptimalityReport(base.J, base.se)
    comps = default_comparators(grid.T) if comparators is None else comparators
    for name, rule in comps:
        uc = rule(fs.u, fs.mu, bundle)
        if not np.all(in_U(uc)):
            raise InvalidArgument(f"comparator {name} leaves the control set")
        cs = cost_on_bundle(coeffs, uc, bundle, problem)
        gap, se = paired_gap(base, cs)
        z = gap / se if se > 0 else (0.0 if gap == 0 else np.sign(gap) * np.inf)
        report.rows.append({"name": name, "J": cs.J, "gap": gap, "se": se, "z": float(z),
                            "pass": bool(gap >= -k * se)})
    return report


def self_consistent_h0(coeffs, riccati, bundle, n_iter=20, damping=0.5, tol=1e-4):
    """Damped fixed point of ``h0 = 2 y0(u_bar(h0))`` on a bundle (diagnostic).

    The closed-form initial value assumes the unprojected feedback; when the
    projection onto U binds, the realised ``y0`` under the candidate differs.
    Returns ``(h0, history)``.
    """
    problem = coeffs.to_problem()
    h0 = 2.0 * riccati.y0_hat(coeffs.x0)
    history = [h0]
    for _ in range(n_iter):
        fs = simulate_filter_fbsdfe(coeffs, riccati, bundle, h0=h0)
        target = 2.0 * cost_on_bundle(coeffs, fs.u, bundle, problem).y0
        new = (1 - damping) * h0 + damping * target
        history.append(new)
        if abs(new - h0) <= tol * (1 + abs(h0)):
            h0 = new
            break
        h0 = new
    return h0, history
