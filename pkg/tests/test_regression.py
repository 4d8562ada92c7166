import numpy as np
import pytest

from fbsdeplab.errors import IllConditionedBasis, InsufficientPaths
from fbsdeplab.randmeasures import empty_mark_space, make_time_grid, sample_driver_bundle
from fbsdeplab.regression import basis_size, monomial_exponents, poly_design, solve_backward


def test_monomials():
    assert basis_size(1, 3) == 4
    assert basis_size(2, 2) == 6
    assert (0, 0) in monomial_exponents(2, 2) and (1, 1) in monomial_exponents(2, 2)


def test_design_drops_constant_columns():
    f = np.column_stack([np.linspace(0, 1, 50), np.ones(50)])
    X = poly_design(f, 2)
    assert X.shape == (50, 3)


def test_constant_terminal_exact():
    g = make_time_grid(1.0, 10)
    e = empty_mark_space()
    b = sample_driver_bundle(g, e, e, 400, 1)
    feats = np.cumsum(np.c_[np.zeros(400), b.dw1], axis=1)
    bp = solve_backward(np.full(400, 2.5), lambda i, y, *z: 0.0 * y, feats, b, degree=2)
    assert np.max(np.abs(bp.y - 2.5)) < 1e-12
    assert np.max(np.abs(bp.z1)) < 1e-8


def test_too_few_paths():
    g = make_time_grid(1.0, 4)
    e = empty_mark_space()
    b = sample_driver_bundle(g, e, e, 20, 1)
    with pytest.raises(InsufficientPaths):
        solve_backward(np.zeros(20), lambda i, y, *z: y, np.zeros((20, 5)), b, degree=3)


def test_rank_deficient_named():
    g = make_time_grid(1.0, 4)
    e = empty_mark_space()
    b = sample_driver_bundle(g, e, e, 200, 1)
    # a two-valued feature cannot carry a cubic basis
    feats = np.tile((np.arange(200) % 2)[:, None], (1, 5)).astype(float)
    with pytest.raises(IllConditionedBasis, match=r"adjoint-p: rank-deficient.*\(step 3\)"):
        solve_backward(np.zeros(200), lambda i, y, *z: y, feats, b, degree=3, name="adjoint-p")


def test_martingale_residual_mean_zero():
    g = make_time_grid(1.0, 20)
    e = empty_mark_space()
    b = sample_driver_bundle(g, e, e, 5000, 4)
    x = np.c_[np.zeros(5000), np.cumsum(b.dw1, axis=1)]
    bp = solve_backward(np.sin(x[:, -1]), lambda i, y, *z: 0.5 * y, x, b, degree=3, keep_yhat=True)
    for i in range(g.n_steps):
        m = bp.y[:, i + 1] - bp.yhat[:, i]
        assert abs(m.mean()) < 3 * m.std(ddof=1) / np.sqrt(m.size) + 1e-12
