"""Corrector and flux-corrector cell problems on the periodized torus.

Solves (lambda - L) phi_k = b_k for the correctors, assembles the effective
matrix as the edge-consistent energy average of corrected gradients, builds
the centered energy densities psi_ij and their correctors Psi_ij, and
evaluates the third-order constants

    c_ijk = (1/2) < (D Psi_ij)^T a (e_k + D phi_k) >,

which vanish in the lambda -> 0 limit; at finite lambda the integration-by-
parts value <Psi_ij, lambda phi_k> is reported alongside.

The same staggered edge coefficients used by the operator enter every
quadrature here, which is what makes the flux identity and the zero means
hold at solver precision rather than discretization order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DiscretizationInconsistencyError, InvalidParameterError
from .lattice import (
    DivFormOperator,
    Grid,
    GridFunction,
    assemble,
    edge_gradient,
    solve,
)
from .util import atomic_write_text

DEFAULT_TOL = 1e-11


def discrete_drift(op: DivFormOperator, k: int) -> np.ndarray:
    """Lattice drift b_k = (1/2) div(a e_k) built from the operator's own
    edge coefficients; has exactly zero grid mean."""
    g = op.grid
    ak = op.edge_coeffs[k]
    return 0.5 * (ak - np.roll(ak, 1, axis=k)) / g.h


def _rhs_drift(field, grid: Grid, op: DivFormOperator, k: int, rhs_mode: str) -> np.ndarray:
    if rhs_mode == "auto":
        rhs_mode = "analytic" if getattr(field, "is_smooth", True) else "discrete"
    if rhs_mode == "analytic":
        return field.drift_mesh(grid)[k]
    if rhs_mode == "discrete":
        return discrete_drift(op, k)
    raise InvalidParameterError(f"unknown rhs mode {rhs_mode!r}")


def solve_corrector(field, grid: Grid, lam: float, k, tol: float = DEFAULT_TOL,
                    rhs_mode: str = "auto", op: DivFormOperator | None = None,
                    precond: str = "fft") -> GridFunction:
    """Corrector in direction k (basis index or direction vector).

    rhs is xi . b with b the field's analytic drift (default for smooth
    fields) or the lattice drift (non-smooth fields, e.g. two-phase
    laminates).  At lambda = 0 the rhs mean must vanish to 1e-8 of its norm
    scale; the zero-mean constrained solve is used.
    """
    if op is None:
        op = assemble(field, grid, lam)
    elif op.lam != lam:
        op = op.with_lambda(lam)
    if np.isscalar(k):
        rhs = _rhs_drift(field, grid, op, int(k), rhs_mode)
    else:
        xi = np.asarray(k, dtype=np.float64)
        if xi.shape != (grid.d,):
            raise InvalidParameterError("direction must be an index or a d-vector")
        rhs = np.zeros(grid.shape)
        for j in range(grid.d):
            if xi[j]:
                rhs = rhs + xi[j] * _rhs_drift(field, grid, op, j, rhs_mode)
    if lam == 0.0:
        scale = float(np.sqrt(np.mean(rhs * rhs)))
        m = float(rhs.mean())
        if scale > 0 and abs(m) > 1e-8 * max(scale, 1.0):
            raise DiscretizationInconsistencyError(
                f"drift mean {m:.3e} exceeds 1e-8 of its scale on this grid"
            )
        rhs = rhs - m
    out = solve(op, GridFunction(grid, np.ascontiguousarray(rhs)), tol=tol, precond=precond)
    out.meta["lambda"] = lam
    return out


def _edge_fields(op: DivFormOperator, phis: list[GridFunction]) -> np.ndarray:
    """gamma[i][m] = delta_im + (D+ phi_i)_m on m-edges."""
    g = op.grid
    d = g.d
    gamma = np.empty((d, d) + g.shape)
    for i in range(d):
        G = edge_gradient(phis[i])
        for m in range(d):
            gamma[i, m] = G[m] + (1.0 if i == m else 0.0)
    return gamma


def homogenized_matrix(field, grid: Grid, phis: list[GridFunction],
                       op: DivFormOperator | None = None) -> np.ndarray:
    """Effective matrix A[i,j] = < (e_i + D phi_i)^T a (e_j + D phi_j) > as an
    edge quadrature; symmetric by construction."""
    if op is None:
        op = assemble(field, grid, 0.0)
    g = grid
    gamma = _edge_fields(op, phis)
    A = np.empty((g.d, g.d))
    for i in range(g.d):
        for j in range(i, g.d):
            acc = 0.0
            for m in range(g.d):
                acc += float(np.mean(op.edge_coeffs[m] * gamma[i, m] * gamma[j, m]))
            A[i, j] = A[j, i] = acc
    return A


def mean_flux(field, grid: Grid, phi_k: GridFunction, k: int,
              op: DivFormOperator | None = None) -> np.ndarray:
    """Grid mean of a (e_k + D phi_k); equals A_bar e_k at lambda = 0."""
    if op is None:
        op = assemble(field, grid, 0.0)
    G = edge_gradient(phi_k)
    out = np.empty(grid.d)
    for m in range(grid.d):
        out[m] = float(np.mean(op.edge_coeffs[m] * (G[m] + (1.0 if m == k else 0.0))))
    return out


def voigt_reuss_bounds(op: DivFormOperator) -> tuple[np.ndarray, np.ndarray]:
    """(harmonic, arithmetic) mean matrices of the edge coefficients."""
    d = op.grid.d
    H = np.zeros((d, d))
    A = np.zeros((d, d))
    for m in range(d):
        H[m, m] = 1.0 / float(np.mean(1.0 / op.edge_coeffs[m]))
        A[m, m] = float(np.mean(op.edge_coeffs[m]))
    return H, A


def energy_density(field, grid: Grid, phis: list[GridFunction], A_bar: np.ndarray,
                   op: DivFormOperator | None = None) -> list[list[GridFunction]]:
    """Centered energy densities psi_ij on nodes.

    Each node averages its two adjacent edge contributions per direction, so
    the grid mean of psi_ij reproduces the A_bar quadrature exactly and the
    zero mean is structural."""
    if op is None:
        op = assemble(field, grid, 0.0)
    g = grid
    gamma = _edge_fields(op, phis)
    psis: list[list[GridFunction]] = [[None] * g.d for _ in range(g.d)]
    for i in range(g.d):
        for j in range(i, g.d):
            dens = np.zeros(g.shape)
            for m in range(g.d):
                e = op.edge_coeffs[m] * gamma[i, m] * gamma[j, m]
                dens += 0.5 * (e + np.roll(e, 1, axis=m))
            dens -= A_bar[i, j]
            gf = GridFunction(g, dens)
            psis[i][j] = gf
            psis[j][i] = gf
    return psis


def psi_direction(psis, xi: np.ndarray) -> GridFunction:
    """psi_xi = sum_ij xi_i xi_j psi_ij (bilinear reassembly)."""
    xi = np.asarray(xi, dtype=np.float64)
    d = len(psis)
    g = psis[0][0].grid
    vals = np.zeros(g.shape)
    for i in range(d):
        for j in range(d):
            vals += xi[i] * xi[j] * psis[i][j].values
    return GridFunction(g, vals)


def solve_flux_corrector(field, grid: Grid, lam: float, psi_ij: GridFunction,
                         tol: float = DEFAULT_TOL, op: DivFormOperator | None = None,
                         precond: str = "fft") -> GridFunction:
    """(lambda - L) Psi = psi_ij with the zero-mean convention at lambda = 0."""
    if op is None:
        op = assemble(field, grid, lam)
    elif op.lam != lam:
        op = op.with_lambda(lam)
    rhs = psi_ij.values
    if lam == 0.0:
        scale = float(np.sqrt(np.mean(rhs * rhs)))
        m = float(rhs.mean())
        if scale > 0 and abs(m) > 1e-8 * max(scale, 1.0):
            raise DiscretizationInconsistencyError("psi_ij mean is not zero at lambda = 0")
        rhs = rhs - m
    out = solve(op, GridFunction(grid, np.ascontiguousarray(rhs)), tol=tol, precond=precond)
    out.meta["lambda"] = lam
    return out


def third_order_constants(field, grid: Grid, phis: list[GridFunction],
                          Psis: list[list[GridFunction]], lam: float = 0.0,
                          op: DivFormOperator | None = None) -> dict:
    """c_ijk tensor plus the finite-lambda prediction <Psi_lam, lam phi_lam>.

    Returns dict with keys c (d,d,d), ibp_bound (d,d,d), lam.
    """
    if op is None:
        op = assemble(field, grid, lam)
    g = grid
    d = g.d
    gamma = _edge_fields(op, phis)
    c = np.zeros((d, d, d))
    ibp = np.zeros((d, d, d))
    for i in range(d):
        for j in range(i, d):
            DPsi = edge_gradient(Psis[i][j])
            for k in range(d):
                acc = 0.0
                for m in range(d):
                    acc += float(np.mean(op.edge_coeffs[m] * DPsi[m] * gamma[k, m]))
                c[i, j, k] = c[j, i, k] = 0.5 * acc
                val = lam * float(np.mean(Psis[i][j].values * phis[k].values))
                ibp[i, j, k] = ibp[j, i, k] = val
    return {"c": c, "ibp_bound": ibp, "lam": lam}


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


@dataclass
class CorrectorSet:
    """Correctors, effective matrix, energy densities, flux correctors, and
    third-order constants for one environment and discretization."""

    grid: Grid
    lam: float
    phi: list[GridFunction]
    grad_phi: list[GridFunction]
    A_bar: np.ndarray
    psi: list[list[GridFunction]] | None = None
    Psi: list[list[GridFunction]] | None = None
    c: np.ndarray | None = None
    c_ibp_bound: np.ndarray | None = None
    residuals: dict = dc_field(default_factory=dict)

    @staticmethod
    def compute(field, grid: Grid, lam: float = 0.0, tol: float = DEFAULT_TOL,
                with_flux: bool = False, rhs_mode: str = "auto",
                precond: str = "fft") -> "CorrectorSet":
        op = assemble(field, grid, lam)
        d = grid.d
        phis = []
        res = {}
        for k in range(d):
            p = solve_corrector(field, grid, lam, k, tol=tol, rhs_mode=rhs_mode, op=op, precond=precond)
            res[f"phi_{k}"] = p.meta.get("relative_residual", 0.0)
            phis.append(p)
        grads = [GridFunction(grid, edge_node_gradient(p)) for p in phis]
        A = homogenized_matrix(field, grid, phis, op=op.with_lambda(0.0))
        cs = CorrectorSet(grid, lam, phis, grads, A, residuals=res)
        if with_flux:
            psis = energy_density(field, grid, phis, A, op=op.with_lambda(0.0))
            Psis: list[list[GridFunction]] = [[None] * d for _ in range(d)]
            for i in range(d):
                for j in range(i, d):
                    P = solve_flux_corrector(field, grid, lam, psis[i][j], tol=tol, op=op, precond=precond)
                    res[f"Psi_{i}{j}"] = P.meta.get("relative_residual", 0.0)
                    Psis[i][j] = P
                    Psis[j][i] = P
            third = third_order_constants(field, grid, phis, Psis, lam=lam, op=op.with_lambda(0.0))
            cs.psi = psis
            cs.Psi = Psis
            cs.c = third["c"]
            cs.c_ibp_bound = third["ibp_bound"]
        return cs

    def phi_direction(self, xi) -> GridFunction:
        xi = np.asarray(xi, dtype=np.float64)
        vals = np.zeros(self.grid.shape)
        for k in range(self.grid.d):
            vals += xi[k] * self.phi[k].values
        return GridFunction(self.grid, vals)

    def phi_vector(self) -> GridFunction:
        """All basis correctors packed as one vector field (for interpolation)."""
        vals = np.stack([p.values for p in self.phi])
        return GridFunction(self.grid, vals)

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        for k, p in enumerate(self.phi):
            p.save(os.path.join(directory, f"phi_{k}"))
            self.grad_phi[k].save(os.path.join(directory, f"grad_phi_{k}"))
        if self.psi is not None:
            for i in range(self.grid.d):
                for j in range(i, self.grid.d):
                    self.psi[i][j].save(os.path.join(directory, f"psi_{i}{j}"))
                    self.Psi[i][j].save(os.path.join(directory, f"Psi_{i}{j}"))
        summary = {
            "lambda": self.lam,
            "A_bar": self.A_bar.tolist(),
            "c": self.c.tolist() if self.c is not None else None,
            "c_ibp_bound": self.c_ibp_bound.tolist() if self.c_ibp_bound is not None else None,
            "residuals": self.residuals,
            "grid": {"d": self.grid.d, "n": self.grid.n, "L": self.grid.L},
        }
        atomic_write_text(os.path.join(directory, "summary.json"), json.dumps(summary, indent=2) + "\n")

    @staticmethod
    def load(directory: str) -> "CorrectorSet":
        with open(os.path.join(directory, "summary.json"), "r", encoding="utf-8") as f:
            s = json.load(f)
        grid = Grid(**s["grid"])
        d = grid.d
        phi = [GridFunction.load(os.path.join(directory, f"phi_{k}")) for k in range(d)]
        grad_phi = [GridFunction.load(os.path.join(directory, f"grad_phi_{k}")) for k in range(d)]
        cs = CorrectorSet(grid, float(s["lambda"]), phi, grad_phi, np.array(s["A_bar"]),
                          residuals=s.get("residuals", {}))
        if s.get("c") is not None:
            cs.c = np.array(s["c"])
            cs.c_ibp_bound = np.array(s["c_ibp_bound"])
            psi: list[list[GridFunction]] = [[None] * d for _ in range(d)]
            Psi: list[list[GridFunction]] = [[None] * d for _ in range(d)]
            for i in range(d):
                for j in range(i, d):
                    psi[i][j] = psi[j][i] = GridFunction.load(os.path.join(directory, f"psi_{i}{j}"))
                    Psi[i][j] = Psi[j][i] = GridFunction.load(os.path.join(directory, f"Psi_{i}{j}"))
            cs.psi, cs.Psi = psi, Psi
        return cs


def edge_node_gradient(u: GridFunction) -> np.ndarray:
    """Node-collocated gradient as the average of the two adjacent staggered
    differences per axis (equals the centered difference)."""
    g = u.grid
    out = np.empty((g.d,) + g.shape)
    eg = edge_gradient(u)
    for k in range(g.d):
        out[k] = 0.5 * (eg[k] + np.roll(eg[k], 1, axis=k))
    return out
