import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdeplab.errors import InvalidArgument, InvalidTilt
from fbsdeplab.fbsdep import simulate_forward
from fbsdeplab.girsanov import (apply_measure_relations, check_gamma_martingale,
                                gamma_martingale_blocks, simulate_gamma_tilde)
from fbsdeplab.problem import TILT_MESSAGE, FbsdepProblem
from fbsdeplab.randmeasures import MarkSpace, empty_mark_space, make_time_grid, sample_driver_bundle


def _tilted(lam, b2=0.0, ms2=None):
    ms2 = MarkSpace([1.0, 2.0], [1.5, 0.5]) if ms2 is None else ms2
    return FbsdepProblem(b2=lambda t, x, u: b2 + 0 * x, lam=lambda t, x, e: lam + 0 * x * e,
                         sigma1=lambda t, x, u: 0.5 + 0 * x, ms2=ms2, x0=1.0)


def _gamma(p, n_paths=200, seed=1, n_steps=20):
    b = sample_driver_bundle(make_time_grid(1.0, n_steps), p.ms1, p.ms2, n_paths, seed)
    fwd = simulate_forward(p, 0.0, b, record_left=True)
    return b, fwd, simulate_gamma_tilde(p, 0.0, fwd, b)


def test_no_tilt_no_drift_is_one():
    _, _, g = _gamma(_tilted(1.0))
    assert np.array_equal(g.values, np.ones_like(g.values))


def test_half_tilt_without_events_is_e():
    # no events: the compensator contributes -(lam - 1) nu(E) T = 0.5 * 2 * 1
    b, _, g = _gamma(_tilted(0.5), n_paths=400)
    quiet = ~b.has_jump2().any(axis=1)
    assert quiet.sum() > 0
    assert np.allclose(g.values[quiet, -1], np.e, rtol=1e-12)
    # each event multiplies by one half
    n_ev = b.counts2().sum(axis=(1, 2))
    assert np.allclose(g.log_values[:, -1], 1.0 + n_ev * np.log(0.5))


def test_density_positive_and_inverse():
    _, _, g = _gamma(_tilted(0.3, b2=1.2))
    assert np.all(g.values > 0)
    assert np.allclose(g.values * g.inverse, 1.0)


def test_density_mean_one():
    _, _, g = _gamma(_tilted(0.6, b2=0.8), n_paths=20000, seed=5)
    for row in check_gamma_martingale(g):
        assert abs(row["mean"] - 1.0) < 4 * row["se"]


def test_blocked_estimate_matches():
    p = _tilted(0.7, b2=0.4)
    grid = make_time_grid(1.0, 12)
    rows = gamma_martingale_blocks(p, 0.0, grid, 300, 7, block_size=128)
    b = sample_driver_bundle(grid, p.ms1, p.ms2, 300, 7, block_size=128)
    g = simulate_gamma_tilde(p, 0.0, simulate_forward(p, 0.0, b, record_left=True), b)
    direct = check_gamma_martingale(g, [4, 8, 12])
    for r, d in zip(rows, direct):
        assert r["mean"] == pytest.approx(d["mean"], rel=1e-12)


def test_check_all_ones_and_single_path():
    rows = check_gamma_martingale(np.ones((50, 4)))
    assert all(r["mean"] == 1.0 and r["se"] == 0.0 for r in rows)
    single = check_gamma_martingale(np.ones((1, 4)))
    assert all(not r["se_defined"] and np.isnan(r["se"]) for r in single)


@pytest.mark.parametrize("lam", [0.0, -0.5, 1.5, np.nan])
def test_invalid_tilt(lam):
    with pytest.raises(InvalidTilt, match=r"tilt must lie in \[l,1\)"):
        _gamma(_tilted(lam))
    assert TILT_MESSAGE == "tilt must lie in [l,1)"


def test_tilt_at_floor_accepted():
    p = _tilted(0.25).with_(tilt_floor=0.25)
    _, _, g = _gamma(p)
    assert np.all(np.isfinite(g.log_values))


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(0.05, 1.0), b2=st.floats(-2, 2), seed=st.integers(0, 10 ** 6))
def test_measure_relations_round_trip(lam, b2, seed):
    p = _tilted(lam, b2=b2)
    b = sample_driver_bundle(make_time_grid(1.0, 8), p.ms1, p.ms2, 30, seed)
    x = simulate_forward(p, 0.0, b).x
    there = apply_measure_relations(b, p, x, 0.0, "to_original")
    back = apply_measure_relations(there, p, x, 0.0, "to_reference", grid=b.grid)
    assert back.measure == "P"
    assert np.max(np.abs(back.dw2 - b.dw2)) < 1e-12
    assert np.max(np.abs(back.comp2 - b.compensated2())) < 1e-12


def test_measure_relations_shift():
    p = _tilted(0.5, b2=2.0)
    b = sample_driver_bundle(make_time_grid(1.0, 4), p.ms1, p.ms2, 10, 1)
    md = apply_measure_relations(b, p, np.zeros((10, 5)), 0.0)
    assert np.allclose(md.dw2, b.dw2 - 2.0 * 0.25)
    assert np.allclose(md.comp2, b.compensated2() + 0.5 * p.ms2.weights * 0.25)
    with pytest.raises(InvalidArgument):
        apply_measure_relations(b, p, np.zeros((10, 5)), 0.0, "sideways")
