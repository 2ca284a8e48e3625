"""Shared machinery for the heavyweight acceptance runs (importable by the
acceptance tests and by tuning pilots)."""

from __future__ import annotations

import numpy as np

from homolab import Grid, make_field
from homolab.correctors import CorrectorSet
from homolab.fields import ConstantField
from homolab.forward import GaussianDatum, solve_parabolic
from homolab.lattice import spline_eval, spline_prefilter
from homolab.util import mean_and_se, pairwise_mean

FIELD3D = dict(model="poisson-bump", d=3, L=16.0, intensity=1.0, c_minus=0.5, c_plus=2.0)
RUNGS3D = ((0.25, 4.0, 1.0 / 32), (0.125, 2.0, 1.0 / 64))  # (eps, domain, dt)
VAR3D = 0.15
T3D = 0.25
DELTA3D = np.array([0.53, -0.31, 0.17])


def random3d_env(args):
    """One environment of the d=3 pointwise-expansion run.

    Returns the corrector matrix plus, per rung, (u_eps at the probe, phi at
    the probe in field coordinates); the reference-flow pieces that need the
    ensemble A_bar are assembled by the caller.
    """
    seed, n_field, tol_corr, tol_cn = args
    fld = make_field(seed=int(seed), **FIELD3D)
    cs = CorrectorSet.compute(fld, Grid(3, n_field, FIELD3D["L"]), rhs_mode="discrete",
                              tol=tol_corr)
    phi_spline = spline_prefilter(cs.phi_vector())
    out = {"A": cs.A_bar}
    for eps, P, dt in RUNGS3D:
        grid = Grid(3, int(round(n_field / FIELD3D["L"] * P / eps)), P)
        center = np.full(3, P / 2)
        f = GaussianDatum(3, P, amplitude=1.0, center=center, variance=VAR3D)
        x = center + DELTA3D
        sol = solve_parabolic(fld, eps, f, T3D, grid, dt=dt, tol=tol_cn)
        u_spline = spline_prefilter(sol["slices"][-1])
        u_eps = float(spline_eval(u_spline, np.mod(x, P)[None, :])[0])
        y = np.mod(x / eps, FIELD3D["L"])
        phi = spline_eval(phi_spline, y[None, :])[:, 0]
        out[eps] = (u_eps, phi)
    return out


def assemble_random3d(results, tol_cn=5e-7):
    """Combine per-environment results into per-rung C_eps samples."""
    d = 3
    stack = np.stack([r["A"] for r in results])
    A_ref = np.array([[pairwise_mean(stack[:, i, j]) for j in range(d)] for i in range(d)])
    C = {}
    for eps, P, dt in RUNGS3D:
        grid = Grid(3, int(round(8 * P / eps)), P)
        center = np.full(3, P / 2)
        f = GaussianDatum(3, P, amplitude=1.0, center=center, variance=VAR3D)
        x = center + DELTA3D
        ref_field = ConstantField(3, matrix=A_ref, L=P)
        ref = solve_parabolic(ref_field, eps, f, T3D, grid, dt=dt, tol=tol_cn)
        u_hom = float(spline_eval(spline_prefilter(ref["slices"][-1]), np.mod(x, P)[None, :])[0])
        grad = f.heat_gradient(A_ref, T3D, x[None, :])[0]
        samples = []
        for r in results:
            u_eps, phi = r[eps]
            samples.append((u_eps - u_hom - eps * float(grad @ phi)) / eps)
        C[eps] = np.array(samples)
    return A_ref, C


def random3d_summary(C):
    eps_hi, eps_lo = RUNGS3D[0][0], RUNGS3D[1][0]
    m_hi, se_hi = mean_and_se(np.abs(C[eps_hi]))
    m_lo, se_lo = mean_and_se(np.abs(C[eps_lo]))
    dm, dse = mean_and_se(np.abs(C[eps_hi]) - np.abs(C[eps_lo]))
    return {
        "mean_abs": {eps_hi: m_hi, eps_lo: m_lo},
        "se": {eps_hi: se_hi, eps_lo: se_lo},
        "paired_drop": dm,
        "paired_se": dse,
        "paired_sigmas": dm / dse if dse > 0 else np.inf,
    }
