"""Path simulation, martingale decomposition, and environment statistics."""

import numpy as np
import pytest
from scipy import stats

from homolab import Grid, GridFunction, InvalidParameterError, make_field
from homolab.correctors import CorrectorSet
from homolab.errors import SimulationBlowupError
from homolab.forward import CosineDatum, GaussianDatum, solve_parabolic
from homolab.lattice import spline_eval, spline_prefilter
from homolab.walk import (
    CoeffSampler,
    decompose,
    env_decay,
    mc_solution,
    simulate_path,
    surrogate_curve_by_convolution,
)


def test_identity_diffusion_is_brownian():
    fld = make_field("constant", d=2, value=1.0)
    n = 4000
    t = 2.0
    b = simulate_path(fld, np.zeros(2), dt=0.05, t_final=t, seed=3, n_paths=n, store=False)
    sq = ((b.X[-1] - b.X[0]) ** 2).sum(axis=1)
    se = t * np.sqrt(2 * 2 / n)
    assert abs(sq.mean() - 2 * t) <= 3 * se


def test_scaled_identity_variance():
    c = 2.5
    fld = make_field("constant", d=2, value=c)
    n = 4000
    t = 1.5
    b = simulate_path(fld, np.zeros(2), dt=0.05, t_final=t, seed=5, n_paths=n, store=False)
    sq = ((b.X[-1] - b.X[0]) ** 2).sum(axis=1)
    se = c * t * np.sqrt(2 * 2 / n)
    assert abs(sq.mean() - 2 * c * t) <= 3 * se


def test_path_reproducible_from_seed():
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=2)
    b1 = simulate_path(fld, np.zeros(2), dt=0.01, t_final=0.5, seed=42, n_paths=3)
    b2 = simulate_path(fld, np.zeros(2), dt=0.01, t_final=0.5, seed=42, n_paths=3)
    np.testing.assert_array_equal(b1.X, b2.X)


def test_blowup_reports_step_index():
    class Bad:
        model = "bad"
        d = 2
        L = 1.0
        c_minus = c_plus = 1.0
        constant_matrix = None
        is_smooth = True

        def evaluate_batch(self, pts):
            n = pts.shape[0]
            return np.full((n, 2), np.inf), np.zeros((n, 2))

    sampler = CoeffSampler.__new__(CoeffSampler)
    sampler.field = Bad()
    sampler.d = 2
    sampler.const_sqrt = None
    sampler.mode = "exact"
    sampler.cache_error_bound = 0.0
    with pytest.raises(SimulationBlowupError) as exc:
        simulate_path(sampler, np.zeros(2), dt=0.1, t_final=1.0, seed=1, n_paths=2)
    assert exc.value.step_index == 0


def test_mc_constant_function_zero_se():
    fld = make_field("laminate", d=2, L=1.0)
    f = CosineDatum(2, period=1.0, modes=[(0.9, (0, 0), 0.0)])
    est, se = mc_solution(fld, 0.5, f, 0.5, [0.3, 0.3], n_paths=64, seed=1, dt=0.02)
    assert est == pytest.approx(0.9, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_mc_matches_heat_kernel_constant_field():
    fld = make_field("constant", d=2, value=1.3)
    f = GaussianDatum(2, period=4.0, variance=0.3)
    t, x = 0.5, np.array([2.0, 2.2])
    est, se = mc_solution(fld, 0.5, f, t, x, n_paths=4000, seed=7, dt=0.01)
    exact = f.heat_value(1.3 * np.eye(2), t, x[None, :])[0]
    assert abs(est - exact) <= 3 * se


def test_mc_matches_forward_solver_laminate():
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    f = CosineDatum(2, period=2.0, modes=[(1.0, (1, 0), 0.3)])
    eps, t = 0.5, 0.5
    x = np.array([0.9, 1.1])
    grid = Grid(2, 64, 2.0)  # h = 1/32, m = 16
    out = solve_parabolic(fld, eps, f, t, grid, dt=1e-3)
    ref = float(spline_eval(spline_prefilter(out["slices"][0]), x[None, :])[0])
    est, se = mc_solution(fld, eps, f, t, x, n_paths=6000, seed=11, dt=4e-3, coeff="exact")
    assert abs(est - ref) <= 3 * se + 2e-3


def test_mc_rejects_too_few_paths():
    fld = make_field("constant", d=2, value=1.0)
    f = CosineDatum(2, period=1.0, modes=[(1.0, (1, 0), 0.0)])
    with pytest.raises(InvalidParameterError):
        mc_solution(fld, 0.5, f, 0.1, [0.0, 0.0], n_paths=1, seed=0)


def test_decompose_constant_field_closed_forms():
    c = 1.8
    fld = make_field("constant", d=2, value=c)
    grid = Grid(2, 8, 1.0)
    cs = CorrectorSet.compute(fld, grid)
    eps, t_unit = 0.5, 3.0
    xi = np.array([1.0, 0.5])
    b = simulate_path(fld, np.zeros(2), dt=0.05, t_final=t_unit, seed=9, n_paths=16)
    decompose(b, cs, xi, eps)
    np.testing.assert_allclose(b.R, 0.0, atol=1e-14)
    proj = eps * (b.X - b.X[0]) @ xi
    np.testing.assert_allclose(b.M, proj, atol=1e-13)
    qv_exact = eps**2 * b.times * c * (xi @ xi)
    np.testing.assert_allclose(b.QV, np.broadcast_to(qv_exact[:, None], b.QV.shape), rtol=1e-12)


def test_decompose_telescoping_exact_random_field():
    fld = make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=30)
    grid = Grid(2, 32, 8.0)
    cs = CorrectorSet.compute(fld, grid, rhs_mode="discrete")
    b = simulate_path(fld, np.array([1.0, 2.0]), dt=0.02, t_final=4.0, seed=12, n_paths=32)
    decompose(b, cs, np.array([0.7, -0.2]), 0.25)
    assert np.abs(b.telescoping_residual()).max() < 1e-12
    assert np.all(np.diff(b.QV, axis=0) >= -1e-15)
    assert np.isfinite(b.meta["euler_defect_max"])


def test_qv_rate_matches_effective_matrix_laminate():
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    grid = Grid(2, 32, 1.0)
    cs = CorrectorSet.compute(fld, grid, rhs_mode="discrete", tol=1e-12)
    xi = np.array([1.0, 0.0])
    eps, horizon = 1.0, 20.0
    b = simulate_path(fld, np.zeros(2), dt=0.01, t_final=horizon, seed=21, n_paths=128)
    decompose(b, cs, xi, eps)
    rates = b.QV[-1] / horizon
    mean, se = rates.mean(), rates.std(ddof=1) / np.sqrt(len(rates))
    sigma2 = float(xi @ cs.A_bar @ xi)
    assert abs(mean - sigma2) <= 3 * se + 1e-3


def test_martingale_increment_moments():
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    grid = Grid(2, 32, 1.0)
    cs = CorrectorSet.compute(fld, grid, rhs_mode="discrete", tol=1e-12)
    b = simulate_path(fld, np.zeros(2), dt=0.01, t_final=8.0, seed=33, n_paths=256)
    decompose(b, cs, np.array([1.0, 0.0]), 1.0)
    # disjoint windows
    k = len(b.times) // 4
    for w in range(4):
        dM = b.M[(w + 1) * k - 1] - b.M[w * k]
        dQV = (b.QV[(w + 1) * k - 1] - b.QV[w * k]).mean()
        n = b.n_paths
        se_mean = dM.std(ddof=1) / np.sqrt(n)
        assert abs(dM.mean()) <= 3 * se_mean
        var = dM.var(ddof=1)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert abs(var - dQV) <= 3 * se_var


def test_env_decay_zero_functional():
    flds = [make_field("poisson-bump", d=2, L=4.0, intensity=1.0, seed=s) for s in range(2)]
    out = env_decay(flds, lambda cs: GridFunction.zeros(cs.grid), [0.5, 1.0],
                    n_paths=8, seed=4)
    np.testing.assert_allclose(out["values"], 0.0, atol=1e-30)


def test_env_decay_surrogate_matches_convolution_oracle():
    flds = [make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=100 + s) for s in range(12)]
    times = [0.5, 1.0, 2.0]
    sets = []
    for fld in flds:
        sets.append(CorrectorSet.compute(fld, Grid(2, 32, 8.0), rhs_mode="discrete"))
    mc = env_decay(flds, "phi_xi", times, n_paths=48, seed=5, corrector_sets=sets,
                   surrogate=True, dt=0.01)
    oracle = surrogate_curve_by_convolution(flds, "phi_xi", times, corrector_sets=sets)
    for j in range(len(times)):
        assert abs(mc["values"][j] - oracle[j]) <= 3 * mc["ses"][j] + 0.02 * abs(oracle[j])


def test_reversibility_surrogate():
    # stationary start: time-reversed pair statistics match forward ones
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    rng = np.random.default_rng(8)
    n = 2000
    x0 = rng.uniform(0, 1, (n, 2))
    b = simulate_path(fld, x0, dt=0.01, t_final=1.0, seed=17, n_paths=n)
    g = lambda x: np.sin(2 * np.pi * x[:, 0])
    h = lambda x: np.cos(2 * np.pi * x[:, 0] + 0.7)
    fwd = g(b.X[0]) * h(b.X[-1])
    rev = g(b.X[-1]) * h(b.X[0])
    se = np.sqrt(fwd.var(ddof=1) / n + rev.var(ddof=1) / n)
    assert abs(fwd.mean() - rev.mean()) <= 3 * se


def test_clt_drift_kolmogorov_smirnov():
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    grid = Grid(2, 32, 1.0)
    cs = CorrectorSet.compute(fld, grid, rhs_mode="discrete", tol=1e-12)
    eps, t = 0.25, 1.0
    n = 2000
    b = simulate_path(fld, np.zeros(2), dt=0.01, t_final=t / eps**2, seed=23, n_paths=n,
                      store=False)
    xi = np.array([1.0, 0.0])
    samples = eps * (b.X[-1] - b.X[0]) @ xi / np.sqrt(t)
    sigma = np.sqrt(float(xi @ cs.A_bar @ xi))
    stat = stats.kstest(samples, "norm", args=(0.0, sigma)).statistic
    assert stat < 1.63 / np.sqrt(n)


def test_quantized_sampler_cache_and_agreement():
    fld = make_field("poisson-bump", d=2, L=4.0, intensity=1.0, seed=3)
    s_exact = CoeffSampler(fld, "exact")
    s_quant = CoeffSampler(fld, "quantized")
    assert s_quant.cache_error_bound > 0
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 4, (50, 2))
    a1, _ = s_exact.eval(x)
    a2, _ = s_quant.eval(x)
    # nearest-cell evaluation differs by at most Lipschitz * cell radius
    assert np.abs(a1 - a2).max() < 1.0
    # cache hit: repeated evaluation identical
    a3, _ = s_quant.eval(x)
    np.testing.assert_array_equal(a2, a3)
