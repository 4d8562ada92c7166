"""Time grids, Brownian drivers and Poisson random measures on finite mark spaces.

Two representations of the noise are provided.  ``Drivers`` holds a single
realisation with exact jump times (useful for inspection and for the
compensated-integral routine), while ``DriverBundle`` stores many paths as
dense arrays for vectorised solvers.  Both are produced by the same block
sampler, so ``sample_drivers(grid, ms1, ms2, seed)`` and the first path of
``sample_driver_bundle(grid, ms1, ms2, 1, seed)`` coincide.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericError
from .rng import BLOCK_SIZE, STREAM_DRIVERS, blocks, substream


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self):
        return np.diff(self.nodes)

    @property
    def step(self):
        return self.T / self.n_steps

    def index_of(self, t):
        """Index of the grid node closest to ``t``."""
        return int(np.argmin(np.abs(self.nodes - t)))


def make_time_grid(T, n_steps):
    """Uniform partition of ``[0, T]`` into ``n_steps`` intervals."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got {T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    nodes = np.linspace(0.0, float(T), n_steps + 1)
    nodes[-1] = float(T)
    nodes.setflags(write=False)
    return TimeGrid(float(T), n_steps, nodes)


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark space with intensity weights nu(e_k)."""

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if marks.shape != weights.shape:
            raise InvalidArgument("marks and weights must have the same length")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvalidArgument("mark weights must be finite and non-negative")
        marks.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self):
        return self.marks.size

    @property
    def total_mass(self):
        return float(self.weights.sum())

    def integrate(self, values):
        """Sum over marks of ``values[..., k] * nu_k``."""
        return np.asarray(values) @ self.weights


def empty_mark_space():
    return MarkSpace(np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class JumpTrain:
    """Sorted jump times in (0, T] with mark indices.

    ``offsets`` is a CSR-style index: the events falling in grid interval
    ``(t_i, t_{i+1}]`` are ``times[offsets[i]:offsets[i + 1]]``.
    """

    times: np.ndarray
    marks: np.ndarray
    step_index: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return self.times.size

    def events_in_step(self, i):
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.times[lo:hi], self.marks[lo:hi]


def _step_of(grid, times):
    # event at tau belongs to the interval (t_i, t_{i+1}]
    idx = np.searchsorted(grid.nodes, times, side="left") - 1
    return np.clip(idx, 0, grid.n_steps - 1)


def make_jump_train(grid, times, marks, ms=None):
    times = np.asarray(times, dtype=float).reshape(-1)
    marks = np.asarray(marks, dtype=np.int64).reshape(-1)
    if times.shape != marks.shape:
        raise InvalidArgument("times and marks must have the same length")
    if times.size:
        if np.any(times <= 0) or np.any(times > grid.T):
            raise InvalidArgument("jump times must lie in (0, T]")
        if np.any(np.diff(times) < 0):
            raise InvalidArgument("jump times must be sorted")
        if ms is not None and (marks.min() < 0 or marks.max() >= ms.size):
            raise InvalidArgument("mark index out of range")
    step = _step_of(grid, times)
    offsets = np.searchsorted(step, np.arange(grid.n_steps + 1), side="left")
    return JumpTrain(times, marks, step, offsets)


@dataclass(frozen=True)
class Drivers:
    grid: TimeGrid
    w1: np.ndarray
    w2: np.ndarray
    jumps1: JumpTrain
    jumps2: JumpTrain
    rng_seed: int
    ms1: MarkSpace
    ms2: MarkSpace


@dataclass(frozen=True)
class DriverBundle:
    """Vectorised noise for ``n_paths`` paths.

    ``slots[p, i, s]`` holds the s-th event (in time order) of path ``p`` in
    interval ``i``: codes ``0..K1-1`` are marks of the first measure, codes
    ``K1..K1+K2-1`` marks of the second, and ``-1`` marks an empty slot.
    """

    grid: TimeGrid
    dw1: np.ndarray
    dw2: np.ndarray
    slots: np.ndarray
    ms1: MarkSpace
    ms2: MarkSpace
    seed: int

    @property
    def n_paths(self):
        return self.dw1.shape[0]

    @property
    def n_slots(self):
        return self.slots.shape[2]

    def counts1(self):
        """Jump counts per interval and mark of the first measure, shape (N, n, K1)."""
        return _counts(self.slots, 0, self.ms1.size)

    def counts2(self):
        return _counts(self.slots, self.ms1.size, self.ms2.size)

    def compensated1(self):
        return self.counts1() - self.ms1.weights * self.grid.dt[None, :, None]

    def compensated2(self):
        return self.counts2() - self.ms2.weights * self.grid.dt[None, :, None]

    def has_jump2(self):
        """Boolean (N, n): interval contains at least one event of the second measure."""
        k1 = self.ms1.size
        return np.any(self.slots >= k1, axis=2)

    def w1(self):
        return np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(self.dw1, axis=1)], axis=1)

    def w2(self):
        return np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(self.dw2, axis=1)], axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return DriverBundle(self.grid, self.dw1[idx], self.dw2[idx], self.slots[idx],
                            self.ms1, self.ms2, self.seed)


def _counts(slots, offset, k):
    out = np.zeros(slots.shape[:2] + (k,))
    for j in range(k):
        out[..., j] = np.count_nonzero(slots == offset + j, axis=2)
    return out


def _sample_events(rng, T, ms, n_paths):
    """Poisson(total_mass * T) events per path, uniform times, marks proportional to weights."""
    mass = ms.total_mass
    if mass == 0 or n_paths == 0:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64)
    counts = rng.poisson(mass * T, size=n_paths)
    total = int(counts.sum())
    # T - U(0,T) lies in (0, T]
    times = T - rng.uniform(0.0, T, size=total)
    marks = rng.choice(ms.size, size=total, p=ms.weights / mass)
    paths = np.repeat(np.arange(n_paths), counts)
    order = np.lexsort((times, paths))
    return paths[order], times[order], marks[order]


def _sample_block(rng, grid, ms1, ms2, n_paths):
    sq = np.sqrt(grid.dt)
    dw1 = rng.standard_normal((n_paths, grid.n_steps)) * sq
    dw2 = rng.standard_normal((n_paths, grid.n_steps)) * sq
    ev1 = _sample_events(rng, grid.T, ms1, n_paths)
    ev2 = _sample_events(rng, grid.T, ms2, n_paths)
    return dw1, dw2, ev1, ev2


def _slots_from_events(grid, n_paths, ev1, ev2, k1):
    p = np.concatenate([ev1[0], ev2[0]])
    t = np.concatenate([ev1[1], ev2[1]])
    code = np.concatenate([ev1[2], ev2[2] + k1])
    if p.size == 0:
        return np.full((n_paths, grid.n_steps, 0), -1, dtype=np.int16)
    step = _step_of(grid, t)
    order = np.lexsort((t, step, p))
    p, step, code = p[order], step[order], code[order]
    key = p * grid.n_steps + step
    first = np.r_[True, key[1:] != key[:-1]]
    start = np.maximum.accumulate(np.where(first, np.arange(key.size), 0))
    rank = np.arange(key.size) - start
    n_slots = int(rank.max()) + 1
    slots = np.full((n_paths, grid.n_steps, n_slots), -1, dtype=np.int16)
    slots[p, step, rank] = code
    return slots


def _pad_slots(slots, n_slots):
    if slots.shape[2] == n_slots:
        return slots
    pad = np.full(slots.shape[:2] + (n_slots - slots.shape[2],), -1, dtype=slots.dtype)
    return np.concatenate([slots, pad], axis=2)


def sample_drivers(grid, ms1, ms2, seed):
    """One realisation of (W1, W2, N1, N2), reproducible from ``seed``."""
    rng = substream(seed, STREAM_DRIVERS, 0)
    dw1, dw2, ev1, ev2 = _sample_block(rng, grid, ms1, ms2, 1)
    w1 = np.concatenate([[0.0], np.cumsum(dw1[0])])
    w2 = np.concatenate([[0.0], np.cumsum(dw2[0])])
    return Drivers(grid, w1, w2, make_jump_train(grid, ev1[1], ev1[2], ms1),
                   make_jump_train(grid, ev2[1], ev2[2], ms2), int(seed), ms1, ms2)


def _bundle_block(grid, ms1, ms2, seed, block, n_paths):
    rng = substream(seed, STREAM_DRIVERS, block)
    dw1, dw2, ev1, ev2 = _sample_block(rng, grid, ms1, ms2, n_paths)
    return dw1, dw2, _slots_from_events(grid, n_paths, ev1, ev2, ms1.size)


def sample_block_bundle(grid, ms1, ms2, seed, block, n_paths):
    """Block ``block`` of the bundle that ``sample_driver_bundle`` would produce for ``seed``.

    Lets callers stream very large path counts one block at a time.
    """
    dw1, dw2, slots = _bundle_block(grid, ms1, ms2, seed, block, n_paths)
    return DriverBundle(grid, dw1, dw2, slots, ms1, ms2, int(seed))


def sample_driver_bundle(grid, ms1, ms2, n_paths, seed, threads=1, block_size=BLOCK_SIZE):
    """Sample ``n_paths`` independent driver paths on Philox substreams (one per block)."""
    if n_paths < 1:
        raise InvalidArgument("n_paths must be positive")

    def work(item):
        b, start, stop = item
        return _bundle_block(grid, ms1, ms2, seed, b, stop - start)

    items = list(blocks(n_paths, block_size))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, items))
    else:
        parts = [work(it) for it in items]
    n_slots = max(s.shape[2] for _, _, s in parts)
    return DriverBundle(
        grid,
        np.concatenate([a for a, _, _ in parts]),
        np.concatenate([b for _, b, _ in parts]),
        np.concatenate([_pad_slots(s, n_slots) for _, _, s in parts]),
        ms1, ms2, int(seed),
    )


def bundle_from_drivers(drivers_list):
    """Stack single-path ``Drivers`` into a ``DriverBundle``."""
    drivers_list = list(drivers_list)
    d0 = drivers_list[0]
    grid, k1 = d0.grid, d0.ms1.size
    dw1 = np.stack([np.diff(d.w1) for d in drivers_list])
    dw2 = np.stack([np.diff(d.w2) for d in drivers_list])
    parts = []
    for d in drivers_list:
        ev1 = (np.zeros(len(d.jumps1), np.int64), d.jumps1.times, d.jumps1.marks)
        ev2 = (np.zeros(len(d.jumps2), np.int64), d.jumps2.times, d.jumps2.marks)
        parts.append(_slots_from_events(grid, 1, ev1, ev2, k1))
    n_slots = max(s.shape[2] for s in parts)
    slots = np.concatenate([_pad_slots(s, n_slots) for s in parts])
    return DriverBundle(grid, dw1, dw2, slots, d0.ms1, d0.ms2, d0.rng_seed)


def integrate_compensated(g, train, ms, grid):
    """Integral of ``g`` against the compensated measure: sum over events minus compensator.

    The compensator ``int_0^T sum_k g(t, e_k) nu_k dt`` uses the trapezoid rule
    on the grid nodes.  ``g`` is called as ``g(t, e)`` with scalar arguments.
    """
    raw = 0.0
    for tau, k in zip(train.times, train.marks):
        v = float(g(float(tau), float(ms.marks[k])))
        if not np.isfinite(v):
            raise NumericError(f"integrand not finite at event time {tau}")
        raw += v
    dens = np.zeros(grid.nodes.size)
    for j, t in enumerate(grid.nodes):
        vals = np.array([float(g(float(t), float(e))) for e in ms.marks])
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"integrand not finite at node {j}")
        dens[j] = vals @ ms.weights if vals.size else 0.0
    comp = float(np.sum(0.5 * (dens[1:] + dens[:-1]) * grid.dt))
    return raw - comp
