"""Forward simulation, regression BSDE solver, Picard iteration, norm estimates and the PIDE field."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import DomainOverflow, InvalidArgument, NoContraction, NumericDivergence
from .randmeasures import DriverBundle, Drivers, bundle_from_drivers
from .regression import solve_backward


@dataclass
class ForwardPaths:
    x: np.ndarray
    # state just before the s-th event of step i, NaN on empty slots
    x_left: Optional[np.ndarray] = None


@dataclass
class FrozenBackward:
    """Backward values fed into the forward coefficients during Picard iteration."""

    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray

    def at(self, i):
        return self.y[:, i], self.z1[:, i], self.z2[:, i], self.zeta1[:, i], self.zeta2[:, i]


@dataclass
class FbsdepSolution:
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    zt1: np.ndarray
    zt2: np.ndarray
    y0_se: float = float("nan")
    iterations: int = 1
    residuals: list = field(default_factory=list)
    converged: bool = True
    x_left: Optional[np.ndarray] = None

    @property
    def y0(self):
        return float(np.mean(self.y[:, 0]))

    def frozen(self, problem, grid):
        n = grid.n_steps
        zeta1 = np.empty((self.x.shape[0], n))
        zeta2 = np.empty_like(zeta1)
        for i in range(n):
            zeta1[:, i], zeta2[:, i] = problem.zeta(grid.nodes[i], self.zt1[:, i], self.zt2[:, i])
        return FrozenBackward(self.y, self.z1, self.z2, zeta1, zeta2)


def as_bundle(drivers):
    if isinstance(drivers, Drivers):
        return bundle_from_drivers([drivers]), True
    if isinstance(drivers, DriverBundle):
        return drivers, False
    raise InvalidArgument("expected Drivers or DriverBundle")


def check_marks(problem, bundle):
    if problem.ms1.size != bundle.ms1.size or problem.ms2.size != bundle.ms2.size:
        raise InvalidArgument("drivers were sampled on different mark spaces than the problem")


def control_array(control, n_paths, n_steps):
    """Broadcast a scalar, per-step or per-path-per-step control to shape (N, n)."""
    u = np.asarray(control, dtype=float)
    try:
        return np.broadcast_to(u, (n_paths, n_steps))
    except ValueError as exc:
        raise InvalidArgument(f"control shape {u.shape} incompatible with ({n_paths}, {n_steps})") from exc


def simulate_forward(problem, control, drivers, mode="P", frozen=None, record_left=False):
    """Euler scheme for the state; the drift/diffusion step comes first, then events in time order.

    ``mode="P"`` uses the reference-measure drift (observation drift and tilt
    folded in); ``mode="raw"`` uses ``b1`` unchanged.  Compensators of both
    random measures are folded into the drift.
    """
    if mode not in ("P", "raw"):
        raise InvalidArgument(f"unknown measure mode {mode!r}")
    bundle, single = as_bundle(drivers)
    check_marks(problem, bundle)
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    u = control_array(control, n_paths, n)
    k1 = problem.ms1.size
    nu1, nu2 = problem.ms1.weights, problem.ms2.weights
    x = np.empty((n_paths, n + 1))
    x[:, 0] = problem.x0
    x_left = np.full((n_paths, n, bundle.n_slots), np.nan) if record_left else None

    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        xi, ui = x[:, i], u[:, i]
        bwd = frozen.at(i) if frozen is not None else None
        if mode == "P":
            drift = problem.drift_tilde(t, xi, ui, bwd)
        else:
            drift = np.broadcast_to(np.asarray(problem.b1(t, xi, ui), dtype=float), xi.shape)
        if problem.ms1.size:
            drift = drift - problem.jump1(t, xi, ui) @ nu1
        if problem.ms2.size:
            drift = drift - problem.jump2(t, xi, ui) @ nu2
        s1 = problem.sigma1(t, xi, ui)
        s2 = problem.sigma2(t, xi, ui)
        xn = xi + drift * dt + s1 * bundle.dw1[:, i] + s2 * bundle.dw2[:, i]
        for s in range(bundle.n_slots):
            code = bundle.slots[:, i, s]
            idx = np.nonzero(code >= 0)[0]
            if idx.size == 0:
                continue
            if record_left:
                x_left[idx, i, s] = xn[idx]
            c = code[idx].astype(np.int64)
            jump = np.zeros(idx.size)
            m1 = c < k1
            if np.any(m1):
                j1 = problem.jump1(t, xn[idx[m1]], ui[idx[m1]])
                jump[m1] = j1[np.arange(m1.sum()), c[m1]]
            if np.any(~m1):
                j2 = problem.jump2(t, xn[idx[~m1]], ui[idx[~m1]])
                jump[~m1] = j2[np.arange((~m1).sum()), c[~m1] - k1]
            xn = xn.copy()
            xn[idx] += jump
        if not np.all(np.isfinite(xn)):
            raise NumericDivergence("non-finite state", step=i)
        x[:, i + 1] = xn
    if single:
        return ForwardPaths(x[0], None if x_left is None else x_left[0])
    return ForwardPaths(x, x_left)


def solve_bsdep(problem, forward, control, bundle, degree=3, features=None):
    """Regression solution of the backward equation along given forward paths."""
    x = forward.x if isinstance(forward, ForwardPaths) else np.asarray(forward, dtype=float)
    grid = bundle.grid
    u = control_array(control, bundle.n_paths, grid.n_steps)
    feats = x if features is None else features

    def gen(i, y, z1, z2, zt1, zt2):
        return problem.generator(grid.nodes[i], x[:, i], y, z1, z2, zt1, zt2, u[:, i])

    terminal = np.broadcast_to(np.asarray(problem.phi(x[:, -1]), dtype=float), (bundle.n_paths,))
    bp = solve_backward(terminal, gen, feats, bundle, degree=degree)
    return FbsdepSolution(x, bp.y, bp.z1, bp.z2, bp.zt1, bp.zt2, y0_se=bp.y0_se,
                          x_left=forward.x_left if isinstance(forward, ForwardPaths) else None)


def n2_distance(a, b, bundle):
    """Monte Carlo estimate of the N^2 norm of the difference of two solutions."""
    dt = bundle.grid.dt
    nu1, nu2 = bundle.ms1.weights, bundle.ms2.weights
    sq = np.mean(np.max((a.x - b.x) ** 2, axis=1))
    sq += np.mean(np.max((a.y - b.y) ** 2, axis=1))
    sq += np.mean(((a.z1 - b.z1) ** 2 + (a.z2 - b.z2) ** 2) @ dt)
    if nu1.size:
        sq += np.mean((((a.zt1 - b.zt1) ** 2) @ nu1) @ dt)
    if nu2.size:
        sq += np.mean((((a.zt2 - b.zt2) ** 2) @ nu2) @ dt)
    return float(np.sqrt(sq))


def solve_coupled_picard(problem, control, bundle, tol=1e-8, max_iter=50, degree=3):
    """Fixed-point iteration on the backward components frozen in the forward drift."""
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    zeros = FrozenBackward(np.zeros((n_paths, n + 1)), *(np.zeros((n_paths, n)) for _ in range(4)))
    frozen = zeros
    prev = None
    residuals = []
    for it in range(1, max_iter + 1):
        fwd = simulate_forward(problem, control, bundle, frozen=frozen if problem.is_coupled else None)
        sol = solve_bsdep(problem, fwd, control, bundle, degree=degree)
        sol.iterations = it
        if prev is not None:
            r = n2_distance(sol, prev, bundle)
            residuals.append(r)
            sol.residuals = list(residuals)
            if r <= tol:
                sol.converged = True
                return sol
            if len(residuals) >= 4 and all(residuals[-j] > residuals[-j - 1] for j in range(1, 4)):
                raise NoContraction(
                    f"Picard residual grew for 3 consecutive iterations ({residuals[-1]:.3g}); "
                    "try a smaller horizon")
        prev = sol
        frozen = sol.frozen(problem, grid)
    sol.converged = False
    return sol


def contraction_ratio(residuals, floor=1e-12):
    """Geometric ratio fitted to the residual sequence (entries at or below ``floor`` dropped)."""
    r = np.asarray([v for v in residuals if v > floor], dtype=float)
    if r.size < 2:
        return float("nan")
    slope = np.polyfit(np.arange(r.size), np.log(r), 1)[0]
    return float(np.exp(slope))


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def lbeta_norms(solution, beta, bundle):
    """Monte Carlo L^beta norm estimates with standard errors.

    Jump-component norms are returned in two forms: integrated against the
    intensity (``nu``) and against the counting measure (``N``).  The record
    also carries the paired difference nu-form minus N-form per measure.
    """
    if beta < 2:
        raise InvalidArgument("beta must be >= 2")
    dt = bundle.grid.dt
    half = beta / 2.0
    out = {
        "x_sup": _mean_se(np.max(np.abs(solution.x), axis=1) ** beta),
        "y_sup": _mean_se(np.max(np.abs(solution.y), axis=1) ** beta),
        "z1": _mean_se(((solution.z1 ** 2) @ dt) ** half),
        "z2": _mean_se(((solution.z2 ** 2) @ dt) ** half),
    }
    counts = (bundle.counts1(), bundle.counts2())
    for j, (zt, ms) in enumerate(((solution.zt1, bundle.ms1), (solution.zt2, bundle.ms2)), start=1):
        if ms.size:
            nu_form = (((zt ** 2) @ ms.weights) @ dt) ** half
            n_form = np.sum(zt ** 2 * counts[j - 1], axis=(1, 2)) ** half
        else:
            nu_form = n_form = np.zeros(zt.shape[0])
        out[f"zt{j}_nu"] = _mean_se(nu_form)
        out[f"zt{j}_N"] = _mean_se(n_form)
        out[f"zt{j}_gap"] = _mean_se(nu_form - n_form)
        den = out[f"zt{j}_N"][0]
        out[f"zt{j}_ratio"] = out[f"zt{j}_nu"][0] / den if den > 0 else float("nan")
    return out


@dataclass
class DecouplingField:
    times: np.ndarray
    xs: np.ndarray
    theta: np.ndarray
    x_min: float
    x_max: float

    def at_node(self, j, x):
        return interp_extrap(x, self.xs, self.theta[j])

    def __call__(self, t, x):
        j = np.searchsorted(self.times, t, side="right") - 1
        j = int(np.clip(j, 0, self.times.size - 2))
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - w) * self.at_node(j, x) + w * self.at_node(j + 1, x)

    def dx_at_node(self, j, x):
        slope = np.diff(self.theta[j]) / np.diff(self.xs)
        k = np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.xs.size - 2)
        return slope[k]


def interp_extrap(x, xs, ys):
    """Piecewise-linear interpolation with linear extrapolation beyond the end nodes."""
    x = np.asarray(x, dtype=float)
    k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
    w = (x - xs[k]) / (xs[k + 1] - xs[k])
    return ys[k] + w * (ys[k + 1] - ys[k])


def solve_decoupling_field(problem, grid, x_min, x_max, n_points, pad=None, control=0.0):
    """Backward finite differences for the decoupling field of an uncontrolled system.

    Diffusion and drift are implicit (central differences), the generator and
    the nonlocal jump terms explicit; the space window is padded so that jump
    shifts from the core window stay on the grid, and the edge values are
    extrapolated linearly.
    """
    if not x_max > x_min or n_points < 3:
        raise InvalidArgument("need x_max > x_min and at least 3 space points")
    h = (x_max - x_min) / (n_points - 1)
    core = np.linspace(x_min, x_max, n_points)
    u0 = float(control)
    shift = 0.0
    for t in grid.nodes:
        for jumps in (problem.jump1(t, core, u0), problem.jump2(t, core, u0)):
            if jumps.size:
                shift = max(shift, float(np.max(np.abs(jumps))))
    if pad is None:
        pad = 1.05 * shift + h
    elif shift > pad:
        raise DomainOverflow(f"jump shift {shift:.4g} leaves the padded window (pad {pad:.4g})")
    n_pad = int(np.ceil(pad / h))
    xs = x_min + h * np.arange(-n_pad, n_points + n_pad)
    m = xs.size
    u = np.full(m, u0)

    theta = np.empty((grid.n_steps + 1, m))
    theta[-1] = np.broadcast_to(np.asarray(problem.phi(xs), dtype=float), (m,))
    nu1, nu2 = problem.ms1.weights, problem.ms2.weights
    for j in range(grid.n_steps - 1, -1, -1):
        t, dt = grid.nodes[j], grid.dt[j]
        nxt = theta[j + 1]
        th_x = np.gradient(nxt, h)
        s1 = np.broadcast_to(np.asarray(problem.sigma1(t, xs, u), dtype=float), (m,))
        s2 = np.broadcast_to(np.asarray(problem.sigma2(t, xs, u), dtype=float), (m,))
        jump1 = problem.jump1(t, xs, u)
        jump2 = problem.jump2(t, xs, u)
        zt1 = interp_extrap(xs[:, None] + jump1, xs, nxt) - nxt[:, None]
        zt2 = interp_extrap(xs[:, None] + jump2, xs, nxt) - nxt[:, None]
        bwd = None
        if problem.is_coupled:
            zeta1, zeta2 = problem.zeta(t, zt1, zt2)
            bwd = (nxt, th_x * s1, th_x * s2, zeta1, zeta2)
        mu = problem.drift_tilde(t, xs, u, bwd)
        if nu1.size:
            mu = mu - jump1 @ nu1
        if nu2.size:
            mu = mu - jump2 @ nu2
        diff = 0.5 * (s1 ** 2 + s2 ** 2)
        explicit = problem.generator(t, xs, nxt, th_x * s1, th_x * s2, zt1, zt2, u)
        if nu1.size:
            explicit = explicit + zt1 @ nu1
        if nu2.size:
            explicit = explicit + zt2 @ nu2
        rhs = nxt + dt * explicit
        # (I - dt A) theta_j = rhs on interior nodes, A = mu d/dx + diff d2/dx2
        lo = -dt * (diff / h ** 2 - mu / (2 * h))
        di = 1 + dt * 2 * diff / h ** 2
        up = -dt * (diff / h ** 2 + mu / (2 * h))
        a, b, c = lo[1:-1].copy(), di[1:-1].copy(), up[1:-1].copy()
        # eliminate the linearly extrapolated edge values
        b[0] += 2 * a[0]
        c[0] -= a[0]
        b[-1] += 2 * c[-1]
        a[-1] -= c[-1]
        ab = np.zeros((3, m - 2))
        ab[0, 1:] = c[:-1]
        ab[1] = b
        ab[2, :-1] = a[1:]
        inner = solve_banded((1, 1), ab, rhs[1:-1])
        row = np.empty(m)
        row[1:-1] = inner
        row[0] = 2 * inner[0] - inner[1]
        row[-1] = 2 * inner[-1] - inner[-2]
        if not np.all(np.isfinite(row)):
            raise NumericDivergence("non-finite decoupling field", step=j)
        theta[j] = row
    return DecouplingField(grid.nodes.copy(), xs, theta, float(x_min), float(x_max))


def decoupling_residual(field, x_paths, y_paths, node_stride=1):
    """Max over paths and nodes of |y_t - theta(t, x_t)|; path nodes are ``field`` nodes times stride."""
    x_paths = np.atleast_2d(x_paths)
    y_paths = np.atleast_2d(y_paths)
    worst = 0.0
    for i in range(x_paths.shape[1]):
        th = field.at_node(i * node_stride, x_paths[:, i])
        worst = max(worst, float(np.max(np.abs(y_paths[:, i] - th))))
    return worst


def decoupling_relations(problem, field, x_paths, control=0.0):
    """(y, z1, z2, zt1, zt2) implied by the field along paths sharing the field's time nodes."""
    x_paths = np.atleast_2d(x_paths)
    n = x_paths.shape[1] - 1
    y = np.empty_like(x_paths)
    z1 = np.empty((x_paths.shape[0], n))
    z2 = np.empty_like(z1)
    zt1 = np.empty((x_paths.shape[0], n, problem.ms1.size))
    zt2 = np.empty((x_paths.shape[0], n, problem.ms2.size))
    for i in range(n + 1):
        x = x_paths[:, i]
        y[:, i] = field.at_node(i, x)
        if i == n:
            break
        t = field.times[i]
        u = np.full_like(x, control)
        th_x = field.dx_at_node(i, x)
        z1[:, i] = th_x * problem.sigma1(t, x, u)
        z2[:, i] = th_x * problem.sigma2(t, x, u)
        zt1[:, i] = field.at_node(i, x[:, None] + problem.jump1(t, x, u)) - y[:, i, None]
        zt2[:, i] = field.at_node(i, x[:, None] + problem.jump2(t, x, u)) - y[:, i, None]
    return y, z1, z2, zt1, zt2
