import numpy as np
import pytest

from fbsdeplab.errors import DomainOverflow, InvalidArgument
from fbsdeplab.fbsdep import (FbsdepSolution, contraction_ratio, decoupling_relations,
                              decoupling_residual, lbeta_norms, simulate_forward, solve_bsdep,
                              solve_coupled_picard, solve_decoupling_field)
from fbsdeplab.linear import LinearCoefficients, affine_field
from fbsdeplab.problem import FbsdepProblem
from fbsdeplab.randmeasures import (MarkSpace, empty_mark_space, make_time_grid,
                                    sample_driver_bundle, sample_drivers)


def _bundle(problem, n_steps=20, n_paths=2000, seed=1, T=1.0):
    return sample_driver_bundle(make_time_grid(T, n_steps), problem.ms1, problem.ms2, n_paths, seed)


def test_constant_terminal_gives_constant_y():
    p = FbsdepProblem(phi=lambda x: 3.0 + 0 * x, sigma1=lambda t, x, u: 1.0 + 0 * x)
    b = _bundle(p)
    sol = solve_bsdep(p, simulate_forward(p, 0.0, b), 0.0, b)
    assert np.max(np.abs(sol.y - 3.0)) < 1e-12
    assert np.max(np.abs(sol.z1)) < 1e-8


@pytest.mark.parametrize("r", [0.5, -0.3])
def test_linear_generator_discounts(r):
    # with -dy = g dt - ..., g = r y grows the terminal value by exp(r (T - t))
    p = FbsdepProblem(phi=lambda x: 1.0 + 0 * x, g=lambda t, x, y, *a: r * y)
    b = _bundle(p, n_steps=400, n_paths=50)
    sol = solve_bsdep(p, simulate_forward(p, 0.0, b), 0.0, b, degree=1)
    assert sol.y0 == pytest.approx(np.exp(r), rel=2e-3)


def test_unit_generator_counts_remaining_time():
    p = FbsdepProblem(g=lambda t, x, y, *a: 1.0 + 0 * y)
    b = _bundle(p, n_steps=10, n_paths=50)
    sol = solve_bsdep(p, simulate_forward(p, 0.0, b), 0.0, b, degree=1)
    assert np.allclose(sol.y, 1.0 - b.grid.nodes, atol=1e-12)


def test_forward_gbm_moments():
    mu, s = 0.2, 0.3
    p = FbsdepProblem(b1=lambda t, x, u: mu * x, sigma1=lambda t, x, u: s * x, x0=1.0)
    b = _bundle(p, n_steps=200, n_paths=40000, seed=3)
    xT = simulate_forward(p, 0.0, b, mode="raw").x[:, -1]
    se = xT.std(ddof=1) / np.sqrt(xT.size)
    assert abs(xT.mean() - np.exp(mu)) < 4 * se + 2e-3


def test_forward_single_path_and_event_order(ms_pair):
    ms1, ms2 = ms_pair
    p = FbsdepProblem(f1=lambda t, x, u, e: 0 * x + e, ms1=ms1, ms2=ms2, x0=0.0)
    grid = make_time_grid(1.0, 10)
    d = sample_drivers(grid, ms1, ms2, 9)
    fp = simulate_forward(p, 0.0, d, mode="raw")
    # x_T = sum of mark values - compensator
    expected = ms1.marks[d.jumps1.marks].sum() - ms1.marks @ ms1.weights
    assert fp.x.shape == (11,)
    assert fp.x[-1] == pytest.approx(expected)
    with pytest.raises(InvalidArgument):
        simulate_forward(p, 0.0, d, mode="Q")


def test_terminal_pinning():
    p = FbsdepProblem(sigma1=lambda t, x, u: 1.0 + 0 * x, phi=lambda x: np.sin(x),
                      g=lambda t, x, y, z1, *a: 0.1 * z1 + x)
    b = _bundle(p)
    sol = solve_bsdep(p, simulate_forward(p, 0.0, b), 0.0, b)
    assert np.array_equal(sol.y[:, -1], np.sin(sol.x[:, -1]))


def test_decoupled_picard_stops_after_two_iterations(linear_bench):
    p = linear_bench.to_problem()
    b = _bundle(p, n_paths=1000)
    sol = solve_coupled_picard(p, 0.0, b, degree=2)
    assert sol.iterations == 2 and sol.converged
    assert sol.residuals[0] < 1e-12


def _coupled(kappa):
    lc = LinearCoefficients.from_values(
        a=-0.5, s1c=0.3, s2c=0.5, b22=0.2, b2y=kappa, gx=1.0, gy=0.2, phix=1.0, x0=1.0)
    return lc.to_problem()


def test_contraction_shrinks_with_coupling():
    ratios = []
    for kappa in (1.0, 0.5, 0.25):
        p = _coupled(kappa)
        b = _bundle(p, n_steps=20, n_paths=800, T=0.5)
        sol = solve_coupled_picard(p, 0.0, b, tol=1e-10, max_iter=40, degree=2)
        assert sol.converged
        ratios.append(contraction_ratio(sol.residuals))
    assert ratios[0] > ratios[1] > ratios[2]


def test_contraction_ratio_edge_cases():
    assert np.isnan(contraction_ratio([1.0]))
    assert contraction_ratio([1.0, 0.5, 0.25, 0.125]) == pytest.approx(0.5)


def test_decoupling_field_matches_affine_closed_form(linear_bench):
    p = linear_bench.to_problem()
    grid = make_time_grid(1.0, 100)
    field = solve_decoupling_field(p, grid, -2.0, 4.0, 121)
    A, B = affine_field(linear_bench, 1.0)
    xs = np.linspace(-2, 4, 13)
    for j in (0, 50, 99):
        exact = A(grid.nodes[j]) * xs + B(grid.nodes[j])
        assert np.max(np.abs(field.at_node(j, xs) - exact)) < 0.05 * (1 + np.max(np.abs(exact)))


def test_constant_terminal_field():
    p = FbsdepProblem(phi=lambda x: 0 * x + 2.0, sigma1=lambda t, x, u: 1.0 + 0 * x)
    field = solve_decoupling_field(p, make_time_grid(1.0, 10), -1, 1, 21)
    assert np.allclose(field.theta, 2.0, atol=1e-12)
    y, z1, z2, zt1, zt2 = decoupling_relations(p, field, np.zeros((3, 11)))
    assert np.allclose(y, 2.0) and np.allclose(z1, 0.0, atol=1e-10)
    assert decoupling_residual(field, np.zeros((3, 11)), np.full((3, 11), 2.0)) < 1e-12


def test_jump_outside_window_overflows():
    ms = MarkSpace([5.0], [1.0])
    p = FbsdepProblem(f1=lambda t, x, u, e: 0 * x + e, ms1=ms)
    with pytest.raises(DomainOverflow):
        solve_decoupling_field(p, make_time_grid(1.0, 5), -1, 1, 11, pad=1.0)


def test_lbeta_zero_solution(ms_pair):
    ms1, ms2 = ms_pair
    b = sample_driver_bundle(make_time_grid(1.0, 5), ms1, ms2, 50, 1)
    z = np.zeros((50, 5))
    sol = FbsdepSolution(np.zeros((50, 6)), np.zeros((50, 6)), z, z,
                         np.zeros((50, 5, 2)), np.zeros((50, 5, 3)))
    norms = lbeta_norms(sol, 2, b)
    for key in ("x_sup", "y_sup", "z1", "z2", "zt1_nu", "zt2_N"):
        assert norms[key] == (0.0, 0.0)
    with pytest.raises(InvalidArgument):
        lbeta_norms(sol, 1.5, b)


def test_affine_field_needs_uncoupled_system():
    with pytest.raises(InvalidArgument):
        affine_field(LinearCoefficients.from_values(b2y=1.0, s2c=0.5), 1.0)
    with pytest.raises(InvalidArgument):
        LinearCoefficients.from_values(nonsense=1.0)


def test_affine_field_pure_discounting():
    # phix = 0: A vanishes and B is the discounted constant
    lc = LinearCoefficients.from_values(gy=0.4, phic=2.0, a=-1.0)
    A, B = affine_field(lc, 1.0)
    assert A(0.3) == pytest.approx(0.0, abs=1e-12)
    assert B(0.0) == pytest.approx(2.0 * np.exp(0.4), rel=1e-10)
