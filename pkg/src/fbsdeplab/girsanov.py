"""Density process of the observation measure change and the driver transforms it induces."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .fbsdep import ForwardPaths, as_bundle, check_marks, control_array, simulate_forward
from .randmeasures import sample_block_bundle
from .rng import BLOCK_SIZE, blocks


@dataclass
class GammaPath:
    """Density paths kept in log space; ``values`` exponentiates on demand."""

    log_values: np.ndarray

    @property
    def values(self):
        return np.exp(self.log_values)

    @property
    def inverse(self):
        return np.exp(-self.log_values)


def _event_left_state(x, x_left, i, s, idx):
    if x_left is not None:
        v = x_left[idx, i, s]
        if np.all(np.isfinite(v)):
            return v
    return x[idx, i]


def simulate_gamma_tilde(problem, control, forward, drivers, frozen=None):
    """Log-space integration of d G = G theta dW2 + int G- (lambda - 1) dNc2, theta = b2 / sigma3.

    Between events the continuous part is exact for frozen coefficients,
    including the Ito correction and the compensator drift; each event of the
    second measure multiplies by ``lambda(t, x_{tau-}, e)``.
    """
    bundle, single = as_bundle(drivers)
    check_marks(problem, bundle)
    grid = bundle.grid
    n_paths, n = bundle.n_paths, grid.n_steps
    if isinstance(forward, ForwardPaths):
        x, x_left = np.atleast_2d(forward.x), forward.x_left
        if x_left is not None and single:
            x_left = x_left[None]
    else:
        x, x_left = np.atleast_2d(np.asarray(forward, dtype=float)), None
    if x.shape != (n_paths, n + 1):
        raise InvalidArgument("state paths do not match the drivers")
    u = control_array(control, n_paths, n)
    k1 = problem.ms1.size
    nu2 = problem.ms2.weights
    lg = np.zeros((n_paths, n + 1))
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        xi = x[:, i]
        bwd = frozen.at(i) if frozen is not None else None
        theta = problem.obs_drift(t, xi, u[:, i], bwd) / problem.sigma3(t)
        inc = theta * bundle.dw2[:, i] - 0.5 * theta ** 2 * dt
        if problem.ms2.size:
            inc = inc - ((problem.tilt(t, xi) - 1.0) @ nu2) * dt
            for s in range(bundle.n_slots):
                code = bundle.slots[:, i, s]
                idx = np.nonzero(code >= k1)[0]
                if idx.size == 0:
                    continue
                xl = _event_left_state(x, x_left, i, s, idx)
                lam = problem.tilt(t, xl)
                inc[idx] += np.log(lam[np.arange(idx.size), code[idx].astype(np.int64) - k1])
        lg[:, i + 1] = lg[:, i] + inc
    return GammaPath(lg[0] if single else lg)


@dataclass
class MeasureDrivers:
    """Brownian increments and compensated jump increments under one of the two measures."""

    dw1: np.ndarray
    dw2: np.ndarray
    comp1: np.ndarray
    comp2: np.ndarray
    measure: str


def reference_drivers(bundle):
    return MeasureDrivers(bundle.dw1, bundle.dw2, bundle.compensated1(), bundle.compensated2(), "P")


def apply_measure_relations(drivers, problem, x_path, control, direction="to_original", grid=None):
    """Shift driver increments between the reference and the original measure.

    ``to_original``: dW2~ = dW2 - sigma3^-1 b2 dt and dN2' = dNc2 - (lambda - 1) nu2 dt.
    ``to_reference`` applies the inverse shift.  Accepts a ``DriverBundle``
    (interpreted under the reference measure) or a ``MeasureDrivers``.
    """
    if direction not in ("to_original", "to_reference"):
        raise InvalidArgument(f"unknown direction {direction!r}")
    if isinstance(drivers, MeasureDrivers):
        md = drivers
        if grid is None:
            raise InvalidArgument("grid required when transforming MeasureDrivers")
    else:
        md = reference_drivers(drivers)
        grid = drivers.grid
    x = np.atleast_2d(np.asarray(x_path, dtype=float))
    n_paths, n = md.dw2.shape
    u = control_array(control, n_paths, n)
    sign = -1.0 if direction == "to_original" else 1.0
    dw2 = md.dw2.copy()
    comp2 = md.comp2.copy()
    for i in range(n):
        t, dt = grid.nodes[i], grid.dt[i]
        theta = problem.obs_drift(t, x[:, i], u[:, i]) / problem.sigma3(t)
        dw2[:, i] = md.dw2[:, i] + sign * theta * dt
        if problem.ms2.size:
            comp2[:, i] = md.comp2[:, i] + sign * (problem.tilt(t, x[:, i]) - 1.0) * problem.ms2.weights * dt
    measure = "Pbar" if direction == "to_original" else "P"
    return MeasureDrivers(md.dw1, dw2, md.comp1, comp2, measure)


def check_gamma_martingale(paths, checkpoints=None, grid=None):
    """Mean, SE, max and min of the density at the horizon and two interior checkpoints."""
    vals = paths.values if isinstance(paths, GammaPath) else np.asarray(paths, dtype=float)
    vals = np.atleast_2d(vals)
    n_nodes = vals.shape[1]
    if checkpoints is None:
        checkpoints = [(n_nodes - 1) // 3, 2 * (n_nodes - 1) // 3, n_nodes - 1]
    out = []
    for j in checkpoints:
        v = vals[:, j]
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append({
            "node": int(j),
            "time": None if grid is None else float(grid.nodes[j]),
            "mean": float(v.mean()),
            "se": se,
            "se_defined": v.size > 1,
            "max": float(v.max()),
            "min": float(v.min()),
        })
    return out


def gamma_martingale_blocks(problem, control, grid, n_paths, seed, block_size=BLOCK_SIZE):
    """Streaming estimate of the density moments at three checkpoints, one driver block at a time.

    ``control`` is a constant, an array, or a callable ``bundle -> control``.
    The blocks are exactly those of ``sample_driver_bundle(..., seed)``.
    """
    n = grid.n_steps
    checkpoints = [n // 3, 2 * n // 3, n]
    s1 = np.zeros(3)
    s2 = np.zeros(3)
    vmax = np.full(3, -np.inf)
    vmin = np.full(3, np.inf)
    total = 0
    for b, start, stop in blocks(n_paths, block_size):
        bundle = sample_block_bundle(grid, problem.ms1, problem.ms2, seed, b, stop - start)
        uu = control(bundle) if callable(control) else control
        fwd = simulate_forward(problem, uu, bundle, record_left=True)
        v = simulate_gamma_tilde(problem, uu, fwd, bundle).values[:, checkpoints]
        s1 += v.sum(axis=0)
        s2 += (v ** 2).sum(axis=0)
        vmax = np.maximum(vmax, v.max(axis=0))
        vmin = np.minimum(vmin, v.min(axis=0))
        total += v.shape[0]
    mean = s1 / total
    var = (s2 - total * mean ** 2) / max(total - 1, 1)
    return [{"node": int(j), "time": float(grid.nodes[j]), "mean": float(mean[k]),
             "se": float(np.sqrt(var[k] / total)) if total > 1 else float("nan"),
             "se_defined": total > 1, "max": float(vmax[k]), "min": float(vmin[k])}
            for k, j in enumerate(checkpoints)]
