import numpy as np
import pytest

from fbsdeplab.errors import InvalidArgument, UnclosedSystem
from fbsdeplab.filtering import (FilterSystem, filter_rmse, innovation_check,
                                 integrate_innovation_filter, linear_test_system, particle_oracle,
                                 simulate_signal_observation)
from fbsdeplab.randmeasures import MarkSpace, make_time_grid

GRID = make_time_grid(1.0, 100)


def _silent(**kw):
    # observations carry no information about the signal
    base = dict(alpha=0.0, b2=0.0, c2=[0.0, 0.0], h0_mean=1.0)
    base.update(kw)
    return linear_test_system(**base)


def test_uninformative_filter_follows_prior_mean():
    sys_ = _silent()
    _, obs, _ = simulate_signal_observation(sys_, GRID, 5, 1)
    fp = integrate_innovation_filter(sys_, obs)
    prior = (1 - GRID.dt[0]) ** np.arange(101)
    assert np.allclose(fp.pi_h, prior[None], atol=1e-12)


def test_uninformative_oracle_matches_prior():
    sys_ = _silent()
    _, obs, _ = simulate_signal_observation(sys_, GRID, 1, 2)
    fp = particle_oracle(sys_, obs, 20000, 3)
    prior = (1 - GRID.dt[0]) ** np.arange(101)
    assert np.max(np.abs(fp.pi_h - prior)) < 0.03


def test_constant_signal():
    sys_ = linear_test_system(a=0.0, b1=0.0, b2=0.0, c1=[0.0], c2=[0.0, 0.0],
                              h0_mean=0.7, h0_sd=0.0)
    _, obs, _ = simulate_signal_observation(sys_, GRID, 3, 1)
    assert np.allclose(integrate_innovation_filter(sys_, obs).pi_h, 0.7)
    assert np.allclose(particle_oracle(sys_, obs.path(0), 100, 1).pi_h, 0.7)


def test_filter_mean_matches_signal_mean():
    sys_ = linear_test_system(h0_mean=1.0)
    h, obs, _ = simulate_signal_observation(sys_, GRID, 4000, 5)
    fp = integrate_innovation_filter(sys_, obs)
    d = fp.pi_h[:, -1] - h[:, -1]
    assert abs(d.mean()) < 4 * d.std(ddof=1) / np.sqrt(d.size)
    # filtering reduces the error below the prior spread
    assert d.std() < sys_.h0_sd


def test_variance_riccati_matches_empirical_error():
    sys_ = linear_test_system()
    h, obs, _ = simulate_signal_observation(sys_, make_time_grid(1.0, 400), 4000, 6)
    fp = integrate_innovation_filter(sys_, obs)
    err = h[:, -1] - fp.pi_h[:, -1]
    assert err.var() == pytest.approx(fp.aux[0, -1], rel=0.08)


def test_unclosed_system():
    lin = linear_test_system()
    raw = FilterSystem(lin.drift, lin.b1, lin.b2, lin.c1, lin.c2, lin.obs_drift, lin.obs_noise,
                       lin.obs_jump, lin.ms1, lin.ms2)
    _, obs, _ = simulate_signal_observation(raw, GRID, 2, 1)
    with pytest.raises(UnclosedSystem):
        integrate_innovation_filter(raw, obs)
    # a user closure makes it run
    fp = integrate_innovation_filter(raw, obs, closure=lin.closure, aux0=lin.initial_aux())
    assert np.allclose(fp.pi_h, integrate_innovation_filter(lin, obs).pi_h)


def test_system_checks():
    with pytest.raises(InvalidArgument):
        linear_test_system(B=0.0).check(GRID)
    with pytest.raises(InvalidArgument):
        linear_test_system(C=[1.0, 0.0]).check(GRID)
    with pytest.raises(InvalidArgument):
        linear_test_system(a=0.5)


def test_oracle_deterministic_and_validated():
    sys_ = linear_test_system()
    _, obs, _ = simulate_signal_observation(sys_, GRID, 2, 1)
    a = particle_oracle(sys_, obs.path(1), 500, 9)
    b = particle_oracle(sys_, obs.path(1), 500, 9)
    assert np.array_equal(a.pi_h, b.pi_h) and np.array_equal(a.ess, b.ess)
    with pytest.raises(InvalidArgument):
        particle_oracle(sys_, obs, 500, 9)
    with pytest.raises(InvalidArgument):
        particle_oracle(sys_, obs.path(0), 1, 9)


def test_oracle_variance_shrinks_like_inverse_particles():
    sys_ = linear_test_system()
    grid = make_time_grid(1.0, 40)
    _, obs, _ = simulate_signal_observation(sys_, grid, 1, 4)
    spread = []
    for n in (200, 1600):
        ends = [particle_oracle(sys_, obs, n, s).pi_h[-1] for s in range(30)]
        spread.append(np.var(ends, ddof=1))
    assert 3.0 < spread[0] / spread[1] < 24.0


def test_filter_close_to_oracle():
    sys_ = linear_test_system()
    grid = make_time_grid(1.0, 200)
    _, obs, _ = simulate_signal_observation(sys_, grid, 1, 11)
    fp = integrate_innovation_filter(sys_, obs)
    orc = particle_oracle(sys_, obs, 5000, 11)
    assert not orc.degenerate
    assert filter_rmse(fp.pi_h[0], orc.pi_h) < 0.05 * sys_.stationary_sd()


def test_innovation_is_brownian():
    sys_ = linear_test_system()
    h, obs, bundle = simulate_signal_observation(sys_, GRID, 300, 7)
    fp = integrate_innovation_filter(sys_, obs)
    chk = innovation_check(sys_, h, obs, fp, bundle)
    assert chk.route_gap < 1e-10
    assert chk.passed
