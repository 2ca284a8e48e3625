"""Discrete operator, solver, gradient, and interpolation tests."""

import numpy as np
import pytest

from homolab import Grid, GridFunction, InvalidParameterError, assemble, grad, make_field, solve
from homolab.lattice import (
    edge_divergence,
    edge_gradient,
    spline_eval,
    spline_prefilter,
)


def plane_wave(grid, kvec, phase=0.0):
    coords = grid.coords()
    arg = phase
    for j, kj in enumerate(kvec):
        arg = arg + 2 * np.pi * kj * coords[j] / grid.L
    return GridFunction(grid, np.cos(np.broadcast_to(arg, grid.shape)))


def stencil_symbol(grid, kvec, lam=0.0, coeff=1.0):
    s = lam
    for kj in kvec:
        s += 0.5 * coeff * (2.0 / grid.h * np.sin(np.pi * kj / grid.n)) ** 2
    return s


def test_grid_validation():
    with pytest.raises(InvalidParameterError):
        Grid(2, 5, 1.0)
    with pytest.raises(InvalidParameterError):
        Grid(2, 2, 1.0)
    with pytest.raises(InvalidParameterError):
        Grid(2, 8, -1.0)
    with pytest.raises(InvalidParameterError):
        Grid(3, 1024, 1.0, max_points=1 << 20)


def test_identity_operator_on_constant_is_lambda():
    grid = Grid(2, 16, 1.0)
    fld = make_field("constant", d=2, value=1.0)
    one = GridFunction(grid, np.ones(grid.shape))
    for lam in [0.0, 1.0]:
        op = assemble(fld, grid, lam)
        out = op.apply(one)
        np.testing.assert_allclose(out.values, lam, atol=1e-13)


def test_plane_wave_symbol_oracle():
    grid = Grid(2, 32, 1.0)
    fld = make_field("constant", d=2, value=1.0)
    op = assemble(fld, grid, 0.0)
    for kvec in [(1, 0), (3, 2), (0, 5)]:
        u = plane_wave(grid, kvec, phase=0.37)
        expected = stencil_symbol(grid, kvec)
        np.testing.assert_allclose(op.apply(u).values, expected * u.values, atol=1e-9)


def test_zero_function_stays_zero():
    grid = Grid(3, 8, 1.0)
    fld = make_field("constant", d=3, value=1.0)
    op = assemble(fld, grid, 1.0)
    z = GridFunction.zeros(grid)
    np.testing.assert_array_equal(op.apply(z).values, 0.0)


def test_period_mismatch_rejected():
    grid = Grid(2, 16, 1.5)
    fld = make_field("laminate", d=2, L=1.0)
    with pytest.raises(InvalidParameterError):
        assemble(fld, grid, 0.0)


def test_operator_symmetry_and_psd_random_pairs():
    grid = Grid(2, 12, 1.0)
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=3)
    rng = np.random.default_rng(7)
    for lam in [0.0, 0.8]:
        op = assemble(fld, grid, lam)
        for _ in range(100):
            u = GridFunction(grid, rng.standard_normal(grid.shape))
            v = GridFunction(grid, rng.standard_normal(grid.shape))
            uv = op.bilinear(u, v)
            vu = op.bilinear(v, u)
            scale = max(abs(uv), abs(vu), 1e-30)
            assert abs(uv - vu) / scale < 1e-12
            assert op.bilinear(u, u) >= -1e-12


def test_solve_zero_rhs():
    grid = Grid(2, 16, 1.0)
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=1)
    op = assemble(fld, grid, 0.0)
    out = solve(op, GridFunction.zeros(grid), tol=1e-10)
    np.testing.assert_array_equal(out.values, 0.0)


def test_solve_plane_wave_amplitude_divided_by_symbol():
    grid = Grid(2, 32, 1.0)
    fld = make_field("constant", d=2, value=1.0)
    for lam in [0.0, 0.5]:
        op = assemble(fld, grid, lam)
        kvec = (2, 1)
        rhs = plane_wave(grid, kvec, phase=0.2)
        u = solve(op, rhs, tol=1e-12)
        expected = rhs.values / stencil_symbol(grid, kvec, lam)
        np.testing.assert_allclose(u.values, expected, atol=1e-10)


@pytest.mark.parametrize("precond", ["fft", "jacobi"])
def test_solve_matches_dense_factorization(precond):
    grid = Grid(2, 8, 1.0)
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=5)
    op = assemble(fld, grid, 0.7)
    N = grid.npoints
    dense = np.empty((N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = 1.0
        dense[:, j] = op.apply(e.reshape(grid.shape)).ravel()
    rng = np.random.default_rng(3)
    rhs = rng.standard_normal(grid.shape)
    exact = np.linalg.solve(dense, rhs.ravel()).reshape(grid.shape)
    u = solve(op, GridFunction(grid, rhs), tol=1e-12, precond=precond)
    assert np.abs(u.values - exact).max() < 1e-8


def test_solve_rejects_nonzero_mean_rhs_at_lambda_zero():
    grid = Grid(2, 8, 1.0)
    fld = make_field("constant", d=2, value=1.0)
    op = assemble(fld, grid, 0.0)
    rhs = GridFunction(grid, np.ones(grid.shape))
    with pytest.raises(InvalidParameterError):
        solve(op, rhs, tol=1e-8)


def test_solve_zero_mean_solution_at_lambda_zero():
    grid = Grid(2, 16, 1.0)
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=9)
    op = assemble(fld, grid, 0.0)
    rng = np.random.default_rng(1)
    raw = rng.standard_normal(grid.shape)
    rhs = GridFunction(grid, raw - raw.mean())
    u = solve(op, rhs, tol=1e-11)
    assert abs(u.values.mean()) < 1e-12
    res = op.apply(u).values - rhs.values
    assert np.linalg.norm(res) / np.linalg.norm(rhs.values) < 1e-10


def test_discrete_maximum_principle():
    rng = np.random.default_rng(11)
    grid = Grid(2, 12, 1.0)
    for trial in range(20):
        fld = make_field("periodic-smooth", d=2, L=1.0, seed=trial)
        op = assemble(fld, grid, 0.5 + rng.random())
        rhs = GridFunction(grid, rng.random(grid.shape))
        u = solve(op, rhs, tol=1e-12)
        assert u.values.min() >= -1e-10


def test_grad_constant_is_zero():
    grid = Grid(2, 16, 1.0)
    u = GridFunction(grid, np.full(grid.shape, 3.7))
    np.testing.assert_allclose(grad(u).values, 0.0, atol=1e-14)


def test_grad_sawtooth_away_from_seam():
    grid = Grid(1, 32, 1.0) if False else Grid(2, 32, 1.0)
    x = grid.coords()[0]
    u = GridFunction(grid, np.broadcast_to(x, grid.shape).copy())
    g = grad(u).values[0]
    interior = np.ones(grid.shape, dtype=bool)
    interior[0, :] = interior[-1, :] = False
    np.testing.assert_allclose(g[interior], 1.0, atol=1e-12)


def test_grad_plane_wave_symbol():
    grid = Grid(2, 32, 1.0)
    k = 3
    x = grid.coords()[0]
    u = GridFunction(grid, np.broadcast_to(np.sin(2 * np.pi * k * x), grid.shape).copy())
    g = grad(u).values[0]
    amp = np.sin(2 * np.pi * k * grid.h) / grid.h
    expected = amp * np.broadcast_to(np.cos(2 * np.pi * k * x), grid.shape)
    np.testing.assert_allclose(g, expected, atol=1e-12)


def test_staggered_adjoint_consistency():
    grid = Grid(2, 16, 1.0)
    rng = np.random.default_rng(2)
    for _ in range(10):
        u = GridFunction(grid, rng.standard_normal(grid.shape))
        w = rng.standard_normal((2,) + grid.shape)
        lhs = np.sum(edge_gradient(u) * w) / grid.npoints
        rhs = -np.sum(u.values * edge_divergence(grid, w)) / grid.npoints
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_refinement_consistency_manufactured_solution():
    # exact solution u* = cos(2 pi x) cos(2 pi y); rhs from analytic field data
    fld = make_field("periodic-smooth", d=2, L=1.0, seed=6)
    lam = 1.0
    errs = []
    for n in [32, 64]:
        grid = Grid(2, n, 1.0)
        X = grid.coords()
        ustar = np.cos(2 * np.pi * X[0]) * np.cos(2 * np.pi * X[1])
        dux = -2 * np.pi * np.sin(2 * np.pi * X[0]) * np.cos(2 * np.pi * X[1])
        duy = -2 * np.pi * np.cos(2 * np.pi * X[0]) * np.sin(2 * np.pi * X[1])
        d2ux = -((2 * np.pi) ** 2) * ustar
        d2uy = -((2 * np.pi) ** 2) * ustar
        diag = fld.diag_mesh(grid)
        drift = fld.drift_mesh(grid)
        rhs_vals = lam * ustar - (
            drift[0] * dux + drift[1] * duy + 0.5 * diag[0] * d2ux + 0.5 * diag[1] * d2uy
        )
        op = assemble(fld, grid, lam)
        u = solve(op, GridFunction(grid, np.ascontiguousarray(rhs_vals)), tol=1e-12)
        errs.append(np.abs(u.values - ustar).max())
    order = np.log2(errs[0] / errs[1])
    assert order >= 1.8


def test_spline_reproduces_nodes_and_smooth_function():
    grid = Grid(2, 32, 1.0)
    X = grid.coords()
    vals = np.sin(2 * np.pi * X[0]) * np.cos(4 * np.pi * X[1])
    u = GridFunction(grid, np.broadcast_to(vals, grid.shape).copy())
    coeffs = spline_prefilter(u)
    nodes = np.array([[X[0].ravel()[3], X[1].ravel()[5]], [X[0].ravel()[10], X[1].ravel()[0]]])
    out = spline_eval(coeffs, nodes)
    np.testing.assert_allclose(out, u.values[[3, 10], [5, 0]], atol=1e-12)
    rng = np.random.default_rng(4)
    pts = rng.random((50, 2))
    out = spline_eval(coeffs, pts)
    exact = np.sin(2 * np.pi * pts[:, 0]) * np.cos(4 * np.pi * pts[:, 1])
    assert np.abs(out - exact).max() < 5e-4
    dx = spline_eval(coeffs, pts, deriv=0)
    exact_dx = 2 * np.pi * np.cos(2 * np.pi * pts[:, 0]) * np.cos(4 * np.pi * pts[:, 1])
    assert np.abs(dx - exact_dx).max() < 2e-2


def test_gridfunction_roundtrip(tmp_path):
    grid = Grid(2, 8, 2.0)
    rng = np.random.default_rng(9)
    u = GridFunction(grid, rng.standard_normal(grid.shape))
    u.save(str(tmp_path / "u"))
    v = GridFunction.load(str(tmp_path / "u"))
    np.testing.assert_array_equal(u.values, v.values)
    assert v.grid == grid


def test_gridfunction_rejects_nonfinite():
    grid = Grid(2, 8, 1.0)
    vals = np.zeros(grid.shape)
    vals[0, 0] = np.inf
    with pytest.raises(InvalidParameterError):
        GridFunction(grid, vals)
