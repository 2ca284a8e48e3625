"""Decorrelation, resampling, CLT-distance, and convolution-sum tests."""

import numpy as np
import pytest

from homolab import Grid, InvalidParameterError, make_field, sample_cloud
from homolab.correctors import CorrectorSet
from homolab.diagnostics import (
    DecayCurve,
    SmoothstepTestFunction,
    clt_distance,
    convolution_power_sum,
    covariance_bound_check,
    decorrelation_curve,
    default_test_functions,
    exponent_fit,
    odd_moment_asymmetry,
    resampling_identities,
    stopped_martingale_samples,
)
from homolab.errors import TruncationRadiusError
from homolab.fields import PoissonBumpField
from homolab.util import substream
from homolab.walk import decompose, simulate_path


def test_exponent_fit_exact_power_law():
    t = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    slope, ci = exponent_fit(t, t**-1.0, (1, 16))
    assert abs(slope + 1.0) < 1e-12
    assert ci[0] <= -1.0 <= ci[1]


def test_exponent_fit_noisy_half_power():
    rng = substream(3, 1, 2, 3)
    t = np.geomspace(1, 64, 20)
    vals = t**-0.5 * (1 + 0.01 * rng.standard_normal(20))
    slope, ci = exponent_fit(t, vals, (1, 64), seed=5)
    assert abs(slope + 0.5) < 0.05
    assert ci[0] <= slope <= ci[1]


def test_exponent_fit_constant_curve():
    t = np.array([1.0, 2.0, 4.0, 8.0])
    slope, _ = exponent_fit(t, np.full(4, 2.7), (1, 8))
    assert abs(slope) < 1e-12


def test_exponent_fit_validation():
    t = np.array([1.0, 2.0, 4.0, 8.0])
    with pytest.raises(InvalidParameterError):
        exponent_fit(t, np.ones(4), (1, 2))  # fewer than 4 points in window
    with pytest.raises(InvalidParameterError):
        exponent_fit(t, np.array([1.0, -1.0, 1.0, 1.0]), (1, 8))


def test_decay_curve_requires_increasing_abscissae():
    with pytest.raises(InvalidParameterError):
        DecayCurve.build([1.0, 1.0, 2.0, 3.0], [1, 1, 1, 1], [0, 0, 0, 0], (1, 3))


def test_decorrelation_constant_field_zero():
    flds = [make_field("constant", d=2, value=2.0, L=8.0) for _ in range(3)]
    curve = decorrelation_curve(flds, "phi_xi", [0.5, 1.0, 1.5, 2.0], grid_n_per_unit=2)
    np.testing.assert_allclose(curve.meta["signed_values"], 0.0, atol=1e-20)


def test_decorrelation_lag_zero_variance_and_window_guard():
    flds = [make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=s) for s in range(6)]
    curve = decorrelation_curve(flds, "phi_xi", [0.0, 0.5, 1.0, 1.5, 2.0],
                                grid_n_per_unit=2, window=(0.5, 2.0))
    assert curve.meta["signed_values"][0] > 0  # lag 0 = sample variance
    with pytest.raises(InvalidParameterError):
        decorrelation_curve(flds, "phi_xi", [0.5, 3.0], grid_n_per_unit=2)


def test_odd_moment_asymmetry_detects_skew():
    skewed = [make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=2000 + s, skew=True)
              for s in range(60)]
    plain = [make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=2000 + s, skew=False)
             for s in range(60)]
    out_skew = odd_moment_asymmetry(skewed, 0.25, grid_n_per_unit=8)
    out_plain = odd_moment_asymmetry(plain, 0.25, grid_n_per_unit=8)
    assert out_skew["separation_sigmas"] > 3.0
    assert out_plain["separation_sigmas"] < 3.0


def test_resampling_identity_constant_statistic():
    clouds = [sample_cloud(3.0, 1.0, seed=s, d=2) for s in range(10)]
    rep = resampling_identities(clouds, lambda c: 4.2, (1, 1), seed=1, n_inner=4)
    assert rep["lhs_corrected"] == 0.0
    assert rep["rhs"] == 0.0


def test_resampling_identity_count_matches_poisson_oracle():
    intensity = 1.5
    clouds = [sample_cloud(4.0, intensity, seed=s, d=2) for s in range(250)]
    stat = lambda c: float(c.cell_points((2, 1))[0].size)
    rep = resampling_identities(clouds, stat, (2, 1), seed=9, n_inner=8)
    # both sides estimate Var(N) = intensity; equality within 3 SE and
    # agreement with the analytic value
    assert rep["gap_sigmas"] <= 3.0
    assert abs(rep["rhs"] - intensity) <= 3 * rep["rhs_se"]
    assert abs(rep["lhs_corrected"] - intensity) <= 3 * rep["lhs_se"]


def test_resampling_identity_local_statistic_far_cell_zero():
    base = make_field("poisson-bump", d=2, L=8.0, intensity=1.0, seed=5)

    def stat(cloud):
        return float(base.with_cloud(cloud).evaluate_batch(np.array([[0.5, 0.5]]))[0][0, 0])

    clouds = [sample_cloud(8.0, 1.0, seed=s, d=2) for s in range(6)]
    rep = resampling_identities(clouds, stat, (4, 4), seed=2, n_inner=4)
    assert rep["lhs_raw"] == 0.0
    assert rep["rhs"] == 0.0


def test_covariance_bound_nearby_values():
    x0, x1 = np.array([[2.2, 2.3]]), np.array([[2.7, 2.4]])

    def make_stat(x):
        def stat(cloud):
            fld = PoissonBumpField(2, 8.0, 1.0, 0.5, 2.0, seed=cloud.seed, cloud=cloud)
            return float(fld.evaluate_batch(x)[0][0, 0])
        return stat

    clouds = [sample_cloud(8.0, 1.0, seed=s, d=2) for s in range(80)]
    cells = [(i, j) for i in (1, 2, 3) for j in (1, 2, 3)]
    rep = covariance_bound_check(clouds, make_stat(x0), make_stat(x1), cells, seed=3)
    assert rep["holds_within_se"]


def test_clt_distance_exact_gaussian_surrogate():
    rng = substream(17, 0, 0, 0)
    sigma2, t, n = 1.3, 2.0, 20000
    M = np.sqrt(sigma2 * t) * rng.standard_normal(n)
    QV = np.full(n, sigma2 * t)
    rep = clt_distance(M, QV, sigma2, t, default_test_functions(np.sqrt(sigma2 * t)), M_tau=M)
    for entry in rep["functions"]:
        assert entry["second_order"]["rhs"] == 0.0
        assert entry["second_order"]["holds_within_se"]
        assert entry["third_order"]["rhs"] == 0.0
        assert entry["third_order"]["holds_within_se"]
    assert rep["all_hold"]


def test_clt_distance_validates_bounds():
    with pytest.raises(InvalidParameterError):
        clt_distance([0.0, 1.0], [1.0, 1.0], 1.0, 1.0, [lambda x: x])


def test_smoothstep_bounds_match_numerics():
    tf = SmoothstepTestFunction(1.3, 0.7)
    xs = np.linspace(-0.7, 0.7, 20001)
    f = tf(xs)
    d2 = np.gradient(np.gradient(f, xs), xs)
    assert np.nanmax(np.abs(d2[50:-50])) <= tf.d2_bound * 1.001
    d3 = np.gradient(d2, xs)
    assert np.nanmax(np.abs(d3[100:-100])) <= tf.d3_bound * 1.01
    # Gaussian expectation oracle vs dense quadrature
    from scipy.integrate import quad
    sigma = 0.9
    ref, _ = quad(lambda z: tf(sigma * z) * np.exp(-z * z / 2) / np.sqrt(2 * np.pi), -12, 12)
    assert abs(tf.gauss_expectation(sigma) - ref) < 1e-10


def test_stopped_samples_from_bundle():
    fld = make_field("laminate", d=2, L=1.0, mid=1.5, amp=0.4)
    cs = CorrectorSet.compute(fld, Grid(2, 32, 1.0), rhs_mode="discrete", tol=1e-12)
    b = simulate_path(fld, np.zeros(2), dt=0.02, t_final=8.0, seed=3, n_paths=64)
    decompose(b, cs, np.array([1.0, 0.0]), 0.5)
    sigma2 = float(cs.A_bar[0, 0])
    M_t, QV_t, M_tau = stopped_martingale_samples(b, sigma2)
    assert M_t.shape == QV_t.shape == M_tau.shape == (64,)
    # tau = t wherever QV never crosses sigma^2 t
    never = QV_t <= sigma2 * b.eps**2 * b.times[-1]
    np.testing.assert_array_equal(M_tau[never], M_t[never])


def test_convolution_sum_origin_d3():
    out = convolution_power_sum([0.0], 3, 2, radius=40.0)
    # 1 + sum_{k != 0} |k|^-4, a convergent lattice constant
    assert out["values"][0] > 1.0
    assert np.isfinite(out["values"][0])


def test_convolution_sum_two_radius_stability():
    out1 = convolution_power_sum([20.0], 3, 2, radius=60.0)
    out2 = convolution_power_sum([20.0], 3, 2, radius=90.0)
    assert abs(out1["values"][0] - out2["values"][0]) < 0.01 * out2["values"][0]


def test_convolution_sum_log_case_ratio_bounded():
    out = convolution_power_sum([10.0, 20.0, 40.0], 3, 3, radius=80.0)
    assert out["ratio_band"] < 3.0


def test_convolution_sum_radius_error():
    with pytest.raises(TruncationRadiusError):
        convolution_power_sum([50.0], 3, 2, radius=8.0)


def test_convolution_sum_validation():
    with pytest.raises(InvalidParameterError):
        convolution_power_sum([1.0], 2, 1)
    with pytest.raises(InvalidParameterError):
        convolution_power_sum([1.0], 3, 1)
