import numpy as np
import pytest

from rwre.env import Constant, EnvironmentSpec, HeavyTailNearZero, UniformInterval, harmonic_kappa, sample_environment
from rwre.errors import EmptySampleError, FitQualityError, ParameterDomainError, ShapeError
from rwre.green import PointMass, SemigroupEvolver, measure_to_vector
from rwre.walker import (
    EnsembleStats,
    fit_diffusion,
    marginal_vs_heat_kernel,
    msd_curve,
    run_ensemble,
    simulate_ctrw,
)


def make(family, d=1, L=8, seed=0):
    return sample_environment(EnvironmentSpec(family, d=d, L=L, seed=seed))


def test_trajectory_is_deterministic():
    env = make(Constant(1.0), L=32)
    a = simulate_ctrw(env, [0], 40.0, 7)
    b = simulate_ctrw(env, [0], 40.0, 7)
    assert np.array_equal(a.times, b.times)
    assert np.array_equal(a.sites, b.sites)


def test_trajectory_structure():
    env = make(UniformInterval(0.5, 1.5), L=16, seed=1)
    tr = simulate_ctrw(env, [0], 30.0, 3)
    assert np.all(np.diff(tr.times) > 0)
    steps = np.abs(np.diff(tr.sites[:, 0]))
    assert np.all(steps == 1)
    if tr.absorbed:
        assert np.abs(tr.sites[-1][0]) == 16


def test_mean_holding_time_matches_rate():
    # rate-1 homogeneous d=1: every site has total rate 2, holding mean 1/2
    env = make(Constant(1.0), L=64)
    holds = []
    for w in range(200):
        tr = simulate_ctrw(env, [0], 100.0, 11, walker=w)
        holds.extend(np.diff(tr.times))
    holds = np.asarray(holds)
    se = holds.std(ddof=1) / np.sqrt(len(holds))
    assert abs(holds.mean() - 0.5) < 4 * se


def test_ensemble_reproducible_and_matches_trajectories():
    env = make(UniformInterval(0.5, 1.5), L=16, seed=5)
    tg = np.linspace(2.0, 20.0, 7)
    stats = run_ensemble(env, tg, 25, seed=5)
    stats2 = run_ensemble(env, tg, 25, seed=5)
    assert np.array_equal(stats.msd, stats2.msd)
    # oracle: replay each walker with the single-trajectory engine
    msd = np.zeros(len(tg))
    cnt = np.zeros(len(tg))
    for w in range(25):
        tr = simulate_ctrw(env, [0], tg[-1] + 1.0, 5, walker=w)
        for k, t in enumerate(tg):
            if tr.absorbed and tr.t_final <= t:
                continue
            x = tr.sites[np.searchsorted(tr.times, t, side="right") - 1][0]
            msd[k] += x * x
            cnt[k] += 1
    np.testing.assert_allclose(stats.msd, msd / cnt)
    np.testing.assert_array_equal(stats.n_alive, cnt)


def test_homogeneous_msd_is_linear_with_slope_two():
    spec = EnvironmentSpec(Constant(1.0), d=1, L=128, seed=3)
    tg = np.linspace(10, 200, 20)
    stats = msd_curve(spec, tg, 30000)
    assert stats.survival.min() > 0.99
    assert np.all(np.diff(stats.survival) <= 0)
    assert np.all(stats.msd >= 0)
    fit = fit_diffusion(stats)
    assert fit.kappa == pytest.approx(1.0, rel=0.05)
    assert fit.r2 > 0.999


def test_uniform_env_matches_harmonic_kappa():
    spec = EnvironmentSpec(UniformInterval(0.5, 1.5), d=1, L=256, seed=11)
    env = sample_environment(spec)
    t_max = 0.05 * 256**2
    tg = np.linspace(t_max / 15, t_max, 15)
    stats = run_ensemble(env, tg, 30000, seed=11)
    fit = fit_diffusion(stats, window=(0.3 * t_max, t_max))
    target = harmonic_kappa(env)
    assert fit.kappa == pytest.approx(target, rel=0.05)


def test_heavy_tail_is_subdiffusive():
    spec = EnvironmentSpec(HeavyTailNearZero(0.5, 1.0), d=1, L=256, seed=4)
    tg = np.geomspace(100, 1000, 12)
    stats = msd_curve(spec, tg, 20000)
    fit = fit_diffusion(stats)
    assert fit.exponent < 0.95


def test_homogeneous_2d_kappa_matrix():
    spec = EnvironmentSpec(Constant(1.0), d=2, L=48, seed=6)
    tg = np.linspace(5, 90, 15)
    stats = msd_curve(spec, tg, 30000)
    fit = fit_diffusion(stats)
    K = fit.kappa_matrix
    assert K.shape == (2, 2)
    assert K[0, 0] == pytest.approx(1.0, rel=0.05)
    assert K[1, 1] == pytest.approx(1.0, rel=0.05)
    assert abs(K[0, 1]) < 0.05
    assert abs(K[1, 0]) < 0.05


def test_fit_on_synthetic_exact_line():
    tg = np.linspace(1.0, 10.0, 10)
    stats = EnsembleStats(d=1, L=16, t_grid=tg, msd=2 * 0.7 * tg,
                          msd_se=np.zeros(10), second_moments=np.zeros((10, 1, 1)),
                          survival=np.ones(10), n_alive=np.full(10, 100),
                          ensemble=100, seed=0, occupancy={})
    fit = fit_diffusion(stats)
    assert fit.kappa == pytest.approx(0.7, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0)


def test_fit_window_needs_five_points():
    tg = np.linspace(1.0, 10.0, 10)
    stats = EnsembleStats(d=1, L=16, t_grid=tg, msd=2 * tg,
                          msd_se=np.zeros(10), second_moments=np.zeros((10, 1, 1)),
                          survival=np.ones(10), n_alive=np.full(10, 100),
                          ensemble=100, seed=0, occupancy={})
    with pytest.raises(FitQualityError):
        fit_diffusion(stats, window=(1.0, 3.0))


def test_occupancy_matches_semigroup_within_bands():
    # law of the walk at time tau against the matched semigroup evolution,
    # within 3 sigma multinomial bands; tail cells with expected count < 25
    # are pooled per flank so the normal bands actually apply
    env = make(Constant(1.0), L=64, seed=5)
    tau, M = 100.0, 100000
    stats = run_ensemble(env, np.array([tau]), M, seed=13, occupancy_at=[0])
    u0 = measure_to_vector(PointMass((0.0,)), 64) / 64.0   # plain delta
    probs = SemigroupEvolver(env).evolve(u0, tau / 64.0**2)
    counts = stats.occupancy[0].astype(float)
    expected = M * probs
    core = expected >= 25
    idx = np.arange(len(counts))
    mid = len(counts) // 2
    cs = np.concatenate([counts[core], [counts[~core & (idx < mid)].sum(),
                                        counts[~core & (idx >= mid)].sum()]])
    es = np.concatenate([expected[core], [expected[~core & (idx < mid)].sum(),
                                          expected[~core & (idx >= mid)].sum()]])
    sigma = np.sqrt(es * (1.0 - es / M))
    assert np.all(np.abs(cs - es) <= 3 * sigma)


def test_survival_matches_semigroup_mass():
    env = make(Constant(1.0), L=16, seed=2)
    tau, M = 120.0, 50000
    stats = run_ensemble(env, np.array([tau]), M, seed=3)
    ev = SemigroupEvolver(env)
    u0 = measure_to_vector(PointMass((0.0,)), 16) / 16.0
    mass = ev.evolve(u0, tau / 16.0**2).sum()
    se = np.sqrt(mass * (1 - mass) / M)
    assert abs(stats.survival[0] - mass) < 3 * se


def test_marginal_distance_small_at_desk_scale():
    L, t_scaled = 64, 0.25
    tau = L**2 * t_scaled
    spec = EnvironmentSpec(Constant(1.0), d=1, L=L, seed=21)
    stats = msd_curve(spec, np.array([tau]), 30000, occupancy_at=[0])
    cmp = marginal_vs_heat_kernel(stats, t_scaled, 1.0)
    assert cmp.tv < 0.06
    assert cmp.absorbed_gap < 0.02


def test_marginal_distance_decreases_with_size():
    # binned at fixed macroscopic resolution so sampling noise stays flat
    tvs = []
    for L in (64, 128, 256):
        t_scaled = 0.1
        tau = L**2 * t_scaled
        spec = EnvironmentSpec(Constant(1.0), d=1, L=L, seed=21)
        stats = msd_curve(spec, np.array([tau]), 30000, occupancy_at=[0])
        tvs.append(marginal_vs_heat_kernel(stats, t_scaled, 1.0, bins=8).tv)
    assert all(tvs[i + 1] < tvs[i] for i in range(2))


def test_marginal_requires_matching_snapshot():
    env = make(Constant(1.0), L=16)
    stats = run_ensemble(env, np.array([10.0, 20.0]), 100, seed=1, occupancy_at=[0])
    with pytest.raises(ShapeError):
        marginal_vs_heat_kernel(stats, 20.0 / 16**2, 1.0)   # snapshot missing
    with pytest.raises(ShapeError):
        marginal_vs_heat_kernel(stats, 0.33, 1.0)           # no matching grid time


def test_all_absorbed_raises_empty_sample():
    env = make(Constant(1.0), L=1, seed=0)
    with pytest.raises(EmptySampleError):
        run_ensemble(env, np.array([50.0]), 200, seed=1)


def test_bad_grid_rejected():
    env = make(Constant(1.0), L=4)
    with pytest.raises(ParameterDomainError):
        run_ensemble(env, np.array([2.0, 1.0]), 10, seed=0)
    with pytest.raises(ParameterDomainError):
        run_ensemble(env, np.array([1.0]), 0, seed=0)
    with pytest.raises(ParameterDomainError):
        run_ensemble(env, np.array([1.0]), 10, seed=0, x0=[99])


def test_stats_csv_round_trip(tmp_path):
    spec = EnvironmentSpec(Constant(1.0), d=1, L=8, seed=1)
    stats = msd_curve(spec, np.array([1.0, 2.0, 4.0]), 500, occupancy_at=[2])
    p1 = tmp_path / "msd.csv"
    stats.to_csv(p1)
    lines = p1.read_text().splitlines()
    assert lines[0] == "t,msd,msd_se,survival,n_alive"
    assert len(lines) == 4
    p2 = tmp_path / "occ.csv"
    stats.occupancy_to_csv(p2, 2)
    total = sum(int(line.split(",")[1]) for line in p2.read_text().splitlines()[1:])
    assert total == stats.n_alive[2]
