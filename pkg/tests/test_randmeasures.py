import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdeplab.errors import InvalidArgument, NumericError
from fbsdeplab.randmeasures import (MarkSpace, bundle_from_drivers, empty_mark_space,
                                    integrate_compensated, make_jump_train, make_time_grid,
                                    sample_block_bundle, sample_driver_bundle, sample_drivers)


def test_grid_nodes():
    assert np.array_equal(make_time_grid(1, 4).nodes, [0, 0.25, 0.5, 0.75, 1])
    assert np.array_equal(make_time_grid(1, 1).nodes, [0, 1])
    g = make_time_grid(2.0, 8)
    assert g.step == 0.25
    assert g.index_of(0.74) == 3


@pytest.mark.parametrize("T,n", [(0, 4), (-1, 4), (1, 0), (1, 2.5), (np.inf, 3)])
def test_grid_invalid(T, n):
    with pytest.raises(InvalidArgument):
        make_time_grid(T, n)


def test_mark_space_validation():
    with pytest.raises(InvalidArgument):
        MarkSpace([1, 2], [0.5])
    with pytest.raises(InvalidArgument):
        MarkSpace([1], [-0.1])
    ms = MarkSpace([1, 2], [0.5, 1.5])
    assert ms.total_mass == 2.0
    assert ms.integrate(np.array([2.0, 1.0])) == pytest.approx(2.5)


def test_zero_mass_gives_empty_train():
    g = make_time_grid(1.0, 10)
    zero = MarkSpace([1.0], [0.0])
    for seed in range(20):
        d = sample_drivers(g, zero, zero, seed)
        assert len(d.jumps1) == 0 and len(d.jumps2) == 0


def test_drivers_deterministic(ms_pair):
    g = make_time_grid(1.0, 20)
    a = sample_drivers(g, *ms_pair, 11)
    b = sample_drivers(g, *ms_pair, 11)
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)
    assert np.array_equal(a.jumps2.times, b.jumps2.times)
    assert np.array_equal(a.jumps2.marks, b.jumps2.marks)


def test_bundle_threads_and_blocks_identical(ms_pair):
    g = make_time_grid(1.0, 10)
    a = sample_driver_bundle(g, *ms_pair, 300, 5, threads=1, block_size=64)
    b = sample_driver_bundle(g, *ms_pair, 300, 5, threads=4, block_size=64)
    assert np.array_equal(a.dw1, b.dw1) and np.array_equal(a.slots, b.slots)
    blk = sample_block_bundle(g, *ms_pair, 5, 1, 64)
    assert np.array_equal(blk.dw2, a.dw2[64:128])


def test_single_path_bundle_matches_drivers(ms_pair):
    g = make_time_grid(1.0, 30)
    d = sample_drivers(g, *ms_pair, 3)
    b = sample_driver_bundle(g, *ms_pair, 1, 3)
    assert np.allclose(np.diff(d.w1), b.dw1[0])
    assert np.array_equal(bundle_from_drivers([d]).slots, b.slots)


def test_event_count_poisson_mean():
    # total mass 2 on [0, 1]: the count is Poisson(2)
    g = make_time_grid(1.0, 10)
    ms = MarkSpace([1.0, 2.0], [1.5, 0.5])
    b = sample_driver_bundle(g, empty_mark_space(), ms, 100000, 17)
    n = b.counts2().sum(axis=(1, 2))
    se = n.std(ddof=1) / np.sqrt(n.size)
    assert abs(n.mean() - 2.0) < 3 * se
    assert abs(n.var() - 2.0) < 0.05


def test_counts_consistent_with_slots(ms_pair):
    g = make_time_grid(1.0, 25)
    b = sample_driver_bundle(g, *ms_pair, 500, 2)
    total = (b.slots >= 0).sum()
    assert b.counts1().sum() + b.counts2().sum() == total
    assert np.array_equal(b.has_jump2(), b.counts2().sum(axis=2) > 0)


def test_integrate_compensated_examples():
    g = make_time_grid(1.0, 10)
    ms = MarkSpace([1.0, 2.0], [1.2, 0.8])
    train = make_jump_train(g, [0.3, 0.7], [0, 1], ms)
    assert integrate_compensated(lambda t, e: 0.0, train, ms, g) == 0.0
    empty = make_jump_train(g, [], [], ms)
    assert integrate_compensated(lambda t, e: 1.0, empty, ms, g) == pytest.approx(-2.0)
    # events add g at their marks
    assert integrate_compensated(lambda t, e: e, train, ms, g) == pytest.approx(3.0 - 2.8)
    with pytest.raises(NumericError):
        integrate_compensated(lambda t, e: np.nan, train, ms, g)


def test_jump_train_validation():
    g = make_time_grid(1.0, 4)
    with pytest.raises(InvalidArgument):
        make_jump_train(g, [0.0], [0])
    with pytest.raises(InvalidArgument):
        make_jump_train(g, [0.5, 0.2], [0, 0])
    tr = make_jump_train(g, [0.25, 0.3, 1.0], [0, 1, 0])
    # events belong to (t_i, t_{i+1}]
    assert list(tr.step_index) == [0, 1, 3]
    assert tr.events_in_step(1)[0].tolist() == [0.3]


def test_compensated_mean_and_isometry():
    g = make_time_grid(1.0, 20)
    ms = MarkSpace([1.0, 2.0], [0.7, 1.1])
    b = sample_driver_bundle(g, empty_mark_space(), ms, 40000, 8)
    integrand = np.array([0.5, -1.5])
    val = (b.compensated2() @ integrand).sum(axis=1)
    se = val.std(ddof=1) / np.sqrt(val.size)
    assert abs(val.mean()) < 3 * se
    target = (integrand ** 2) @ ms.weights * g.T
    v2 = (val - val.mean()) ** 2
    assert abs(val.var(ddof=1) - target) < 5 * v2.std(ddof=1) / np.sqrt(v2.size)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), n_steps=st.integers(1, 30),
       w=st.lists(st.floats(0.0, 3.0), min_size=1, max_size=4))
def test_bundle_structure_property(seed, n_steps, w):
    g = make_time_grid(1.0, n_steps)
    ms = MarkSpace(np.arange(len(w)) + 1.0, w)
    b = sample_driver_bundle(g, ms, ms, 20, seed)
    assert b.dw1.shape == (20, n_steps)
    c = b.counts1()
    assert np.all(c >= 0)
    # marks with zero weight never fire
    for k, wk in enumerate(w):
        if wk == 0:
            assert c[..., k].sum() == 0 and b.counts2()[..., k].sum() == 0
    # subsets pick rows
    sub = b.subset([3, 1])
    assert np.array_equal(sub.slots[0], b.slots[3])
