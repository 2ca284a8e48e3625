"""Diffusion in a frozen environment, its martingale decomposition, and
statistics of the environment seen from the particle.

Paths run at unit scale (the diffusive rescaling eps X_{t/eps^2} is applied in
post-processing).  The stepping is Euler-Maruyama with sigma = sqrt(a); by
default coefficients are read through order-3 periodic interpolation of a
grid sampling, with exact evaluation and a quantized-position cache as
alternatives.  The decomposition reconstructs the stochastic increments as
sigma dB = dX - b dt, so xi . (eps X) - xi . x - R - M vanishes identically
per path as accumulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .correctors import CorrectorSet, psi_direction
from .errors import InvalidParameterError, SimulationBlowupError
from .lattice import Grid, GridFunction, spline_eval, spline_prefilter
from .util import mean_and_se, substream

_PATH_TAG = 7


# ---------------------------------------------------------------------------
# Coefficient samplers along paths
# ---------------------------------------------------------------------------


class CoeffSampler:
    """Evaluates (b, sigma, a_diag) at arbitrary unit-scale positions."""

    def __init__(self, field, mode: str = "auto", grid_n: int | None = None,
                 quantize_h: float | None = None):
        self.field = field
        self.d = field.d
        self.const_sqrt = None
        self.cache_error_bound = 0.0
        if getattr(field, "constant_matrix", None) is not None:
            w, V = np.linalg.eigh(field.constant_matrix)
            self.const_sqrt = (V * np.sqrt(w)) @ V.T
            self.mode = "constant"
            return
        if mode == "auto":
            mode = "exact" if field.model in ("constant", "laminate", "periodic-smooth") else "interp"
        self.mode = mode
        if mode == "interp":
            n = grid_n or max(8, int(round(4 * field.L)))
            grid = Grid(field.d, n, field.L)
            diag = field.diag_mesh(grid)
            drift = field.drift_mesh(grid)
            self._diag_spline = spline_prefilter(GridFunction(grid, diag))
            self._drift_spline = spline_prefilter(GridFunction(grid, drift))
        elif mode == "quantized":
            self.h_q = quantize_h or field.L / max(8, int(round(8 * field.L)))
            self._cache: dict[tuple, np.ndarray] = {}
            # reported bound: coefficient Lipschitz scale times half a cell
            self.cache_error_bound = 0.5 * self.h_q * math.sqrt(self.d)
        elif mode != "exact":
            raise InvalidParameterError(f"unknown coefficient mode {mode!r}")

    def eval(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(a_diag, b) at positions x (n, d); wraps periodically."""
        if self.const_sqrt is not None:
            n = x.shape[0]
            a = np.broadcast_to(np.diag(self.field.constant_matrix), (n, self.d))
            return a, np.zeros((n, self.d))
        y = np.mod(x, self.field.L)
        if self.mode == "exact":
            return self.field.evaluate_batch(y)
        if self.mode == "interp":
            a = spline_eval(self._diag_spline, y).T
            b = spline_eval(self._drift_spline, y).T
            return np.clip(a, self.field.c_minus, self.field.c_plus), b
        # quantized: exact evaluation at cell-center representatives, cached
        idx = np.floor(y / self.h_q).astype(np.int64)
        keys = [tuple(row) for row in idx]
        missing = [k for k in keys if k not in self._cache]
        if missing:
            uniq = sorted(set(missing))
            pts = (np.array(uniq, dtype=np.float64) + 0.5) * self.h_q
            a_u, b_u = self.field.evaluate_batch(pts)
            for k, av, bv in zip(uniq, a_u, b_u):
                self._cache[k] = np.concatenate([av, bv])
        rows = np.stack([self._cache[k] for k in keys])
        return rows[:, : self.d], rows[:, self.d :]

    def drift_sigma(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(b, sigma) with sigma the symmetric PSD square root of a."""
        if self.const_sqrt is not None:
            n = x.shape[0]
            return np.zeros((n, self.d)), np.broadcast_to(self.const_sqrt, (n, self.d, self.d))
        a, b = self.eval(x)
        sig = np.zeros((x.shape[0], self.d, self.d))
        rng = np.arange(self.d)
        sig[:, rng, rng] = np.sqrt(a)
        return b, sig

    def qform(self, x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """zeta^T a(x) zeta per row."""
        if self.const_sqrt is not None:
            A = self.field.constant_matrix
            return np.einsum("ni,ij,nj->n", zeta, A, zeta)
        a, _ = self.eval(x)
        return np.einsum("ni,ni,ni->n", zeta, a, zeta)


# ---------------------------------------------------------------------------
# Path bundles
# ---------------------------------------------------------------------------


@dataclass
class PathBundle:
    """Simulated trajectories (unit scale) with optional decomposition.

    X has shape (n_times, n_paths, d) on the periodic lift (unwrapped);
    decomposition arrays appear after decompose(): M, R, QV with shape
    (n_times, n_paths), plus the boundary-formula remainder R_formula and the
    Euler defect R - R_formula.
    """

    dt: float
    times: np.ndarray
    X: np.ndarray
    seed: int
    sampler: CoeffSampler
    xi: np.ndarray | None = None
    eps: float | None = None
    M: np.ndarray | None = None
    R: np.ndarray | None = None
    QV: np.ndarray | None = None
    R_formula: np.ndarray | None = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    def winding(self) -> np.ndarray:
        return np.floor(self.X[-1] / self.sampler.field.L).astype(np.int64)

    def telescoping_residual(self) -> np.ndarray:
        """xi.(eps X_T) - xi.(eps X_0) - R_T - M_T per path (bookkeeping zero)."""
        if self.M is None:
            raise InvalidParameterError("decompose the bundle first")
        proj = self.eps * (self.X[-1] @ self.xi - self.X[0] @ self.xi)
        return proj - self.R[-1] - self.M[-1]


def simulate_path(field, x0, dt: float, t_final: float, seed: int, n_paths: int = 1,
                  coeff: str = "auto", grid_n: int | None = None,
                  store: bool = True) -> PathBundle:
    """Euler-Maruyama paths of dX = b dt + sigma dB in a frozen environment.

    x0 is one starting point (shared) or an (n_paths, d) array.  With
    store=False only the final positions are kept (X has two time rows).
    """
    if dt <= 0 or t_final <= 0:
        raise InvalidParameterError("dt and t_final must be positive")
    sampler = field if isinstance(field, CoeffSampler) else CoeffSampler(field, coeff, grid_n)
    d = sampler.d
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (n_paths, d)).copy()
    if x0.shape != (n_paths, d):
        raise InvalidParameterError("x0 must be a point or an (n_paths, d) array")
    nsteps = max(1, int(round(t_final / dt)))
    dt = t_final / nsteps
    rng = substream(seed, _PATH_TAG, 0, 0)
    X = x0.copy()
    if store:
        out = np.empty((nsteps + 1, n_paths, d))
        out[0] = X
    sqdt = math.sqrt(dt)
    for s in range(nsteps):
        b, sig = sampler.drift_sigma(X)
        dB = rng.standard_normal((n_paths, d))
        X = X + b * dt + np.einsum("nij,nj->ni", sig, dB) * sqdt
        if not np.all(np.isfinite(X)):
            raise SimulationBlowupError("non-finite state during path simulation", step_index=s)
        if store:
            out[s + 1] = X
    if store:
        times = np.arange(nsteps + 1) * dt
        return PathBundle(dt, times, out, seed, sampler)
    times = np.array([0.0, t_final])
    return PathBundle(dt, times, np.stack([x0, X]), seed, sampler)


def mc_solution(field, eps: float, f, t: float, x, n_paths: int, seed: int,
                dt: float = 5e-3, coeff: str = "auto", grid_n: int | None = None,
                batch: int = 4096) -> tuple[float, float]:
    """Monte Carlo estimate of u_eps(t, x) = E_B f(eps X_{t/eps^2}), with its
    standard error."""
    if n_paths < 2:
        raise InvalidParameterError("need at least 2 paths")
    x = np.asarray(x, dtype=np.float64)
    sampler = CoeffSampler(field, coeff, grid_n)
    horizon = t / eps**2
    total, total2, count = 0.0, 0.0, 0
    block = 0
    remaining = n_paths
    while remaining > 0:
        nb = min(batch, remaining)
        bundle = simulate_path(sampler, x / eps, dt, horizon, seed + 7919 * block,
                               n_paths=nb, store=False)
        vals = f.value(np.mod(eps * bundle.X[-1], f.period))
        total += float(vals.sum())
        total2 += float((vals**2).sum())
        count += nb
        remaining -= nb
        block += 1
    mean = total / count
    var = max(total2 / count - mean**2, 0.0) * count / (count - 1)
    return mean, math.sqrt(var / count)


# ---------------------------------------------------------------------------
# Martingale decomposition
# ---------------------------------------------------------------------------


def decompose(bundle: PathBundle, correctors: CorrectorSet, xi, eps: float,
              lam: float | None = None) -> PathBundle:
    """Attach M, R, <M> to a stored bundle.

    M accumulates eps (xi + grad phi_xi)(X_s) . sigma dB with sigma dB
    reconstructed exactly as dX - b dt; R is the bookkeeping complement, so
    the telescoping identity holds to rounding.  R_formula carries the
    boundary expression -eps phi(X_T) + eps phi(X_0) (plus the eps lam
    integral when the correctors are lambda-regularized), and meta records
    the Euler defect |R - R_formula|.
    """
    if bundle.X.shape[0] < 2:
        raise InvalidParameterError("bundle must store the full trajectory")
    xi = np.asarray(xi, dtype=np.float64)
    if correctors is None:
        raise InvalidParameterError("correctors are required for the decomposition")
    lam = correctors.lam if lam is None else lam
    grid = correctors.grid
    phi_xi = correctors.phi_direction(xi)
    grad_vals = np.zeros((grid.d,) + grid.shape)
    for k in range(grid.d):
        grad_vals += xi[k] * correctors.grad_phi[k].values
    phi_spline = spline_prefilter(phi_xi)
    grad_spline = spline_prefilter(GridFunction(grid, grad_vals))
    sampler = bundle.sampler
    T, n, d = bundle.X.shape
    M = np.zeros((T, n))
    R = np.zeros((T, n))
    QV = np.zeros((T, n))
    Rf = np.zeros((T, n))
    dt = bundle.dt
    y0 = np.mod(bundle.X[0], grid.L)
    phi0 = spline_eval(phi_spline, y0)
    lam_integral = np.zeros(n)
    for s in range(T - 1):
        Xs = bundle.X[s]
        ys = np.mod(Xs, grid.L)
        _, b = sampler.eval(Xs)
        gphi = spline_eval(grad_spline, ys).T  # (n, d)
        zeta = xi[None, :] + gphi
        dX = bundle.X[s + 1] - Xs
        noise = dX - b * dt  # sigma dB, reconstructed exactly
        dM = eps * np.einsum("ni,ni->n", zeta, noise)
        M[s + 1] = M[s] + dM
        R[s + 1] = R[s] + eps * (dX @ xi) - dM
        QV[s + 1] = QV[s] + eps**2 * dt * sampler.qform(Xs, zeta)
        if lam:
            lam_integral += lam * spline_eval(phi_spline, ys) * dt
        ynext = np.mod(bundle.X[s + 1], grid.L)
        Rf[s + 1] = eps * (phi0 - spline_eval(phi_spline, ynext)) + eps * lam_integral
    bundle.xi = xi
    bundle.eps = eps
    bundle.M = M
    bundle.R = R
    bundle.QV = QV
    bundle.R_formula = Rf
    bundle.meta["euler_defect_max"] = float(np.abs(R[-1] - Rf[-1]).max())
    bundle.meta["lambda"] = lam
    if sampler.cache_error_bound:
        bundle.meta["cache_error_bound"] = sampler.cache_error_bound
    return bundle


# ---------------------------------------------------------------------------
# Environment-process decay
# ---------------------------------------------------------------------------


def _functional_grid(correctors: CorrectorSet, functional, xi) -> GridFunction:
    if callable(functional):
        return functional(correctors)
    if functional == "phi_xi":
        return correctors.phi_direction(xi)
    if functional == "psi_xi":
        if correctors.psi is None:
            raise InvalidParameterError("corrector set lacks energy densities")
        return psi_direction(correctors.psi, xi)
    raise InvalidParameterError(f"unknown functional {functional!r}")


def env_decay(fields, functionals_or_name, times, n_paths: int, seed: int,
              xi=None, corrector_sets=None, grid_n_per_unit: int = 4,
              dt: float = 0.02, surrogate: bool = False, coeff: str = "auto",
              tol: float = 1e-10) -> dict:
    """Variance decay of f_t = E_B{g(omega_t)} over an environment ensemble.

    For each environment the inner Brownian average uses the unbiased
    pair product ((sum g)^2 - sum g^2) / (n (n-1)), so finitely many paths do
    not floor the curve.  surrogate=True drives the environment by a standard
    Brownian motion (the comparison process).  Returns {"times", "values",
    "ses", "per_env"}.
    """
    times = np.asarray(sorted(times), dtype=np.float64)
    if times[0] <= 0:
        raise InvalidParameterError("decay times must be positive")
    d = fields[0].d
    xi = np.array([1.0] + [0.0] * (d - 1)) if xi is None else np.asarray(xi, dtype=np.float64)
    per_env = []
    for ie, fld in enumerate(fields):
        if corrector_sets is not None:
            cs = corrector_sets[ie]
        else:
            n_field = int(round(grid_n_per_unit * fld.L))
            need_psi = functionals_or_name == "psi_xi"
            cs = CorrectorSet.compute(fld, Grid(d, n_field, fld.L), tol=tol,
                                      with_flux=need_psi, rhs_mode="discrete")
        g = _functional_grid(cs, functionals_or_name, xi)
        g_spline = spline_prefilter(g)
        if surrogate:
            sampler = CoeffSampler(ConstantIdentity(d, fld.L), "exact")
        else:
            sampler = CoeffSampler(fld, coeff)
        bundle = simulate_path(sampler, np.zeros(d), dt, float(times[-1]),
                               seed + 104729 * ie, n_paths=n_paths, store=True)
        idx = np.clip(np.round(times / bundle.dt).astype(np.int64), 0, len(bundle.times) - 1)
        row = []
        for j in idx:
            vals = spline_eval(g_spline, np.mod(bundle.X[j], fld.L))
            s1 = float(vals.sum())
            s2 = float((vals**2).sum())
            row.append((s1 * s1 - s2) / (n_paths * (n_paths - 1)))
        per_env.append(row)
    per_env = np.array(per_env)
    values, ses = [], []
    for j in range(len(times)):
        m, se = mean_and_se(per_env[:, j])
        values.append(m)
        ses.append(se)
    return {"times": times, "values": np.array(values), "ses": np.array(ses), "per_env": per_env}


class ConstantIdentity:
    """Identity-diffusion stand-in used for the Brownian comparison process."""

    model = "constant"

    def __init__(self, d, L):
        self.d = d
        self.L = L
        self.constant_matrix = np.eye(d)
        self.c_minus = 1.0
        self.c_plus = 1.0
        self.is_smooth = True


def surrogate_curve_by_convolution(fields, functional, times, xi=None,
                                   corrector_sets=None, grid_n_per_unit: int = 4,
                                   tol: float = 1e-10) -> np.ndarray:
    """Direct-convolution oracle for the Brownian surrogate:
    E|f_t^o|^2 = int R_g(x) q_{2t}(x) dx with R_g the (ensemble-averaged)
    spatial autocovariance, computed on the torus by FFT."""
    from scipy import fft as sfft

    times = np.asarray(sorted(times), dtype=np.float64)
    d = fields[0].d
    xi = np.array([1.0] + [0.0] * (d - 1)) if xi is None else np.asarray(xi, dtype=np.float64)
    R_acc = None
    for ie, fld in enumerate(fields):
        if corrector_sets is not None:
            cs = corrector_sets[ie]
        else:
            n_field = int(round(grid_n_per_unit * fld.L))
            cs = CorrectorSet.compute(fld, Grid(d, n_field, fld.L), tol=tol,
                                      with_flux=(functional == "psi_xi"), rhs_mode="discrete")
        g = _functional_grid(cs, functional, xi)
        gh = sfft.fftn(g.values)
        # R_g(lag) = mean_x g(x) g(x+lag), circular autocovariance
        R = sfft.ifftn(gh * np.conj(gh)).real / g.grid.npoints
        R_acc = R if R_acc is None else R_acc + R
    R_mean = R_acc / len(fields)
    grid = Grid(d, R_mean.shape[0], fields[0].L)
    axes1d = grid.axis_coords()
    out = []
    for t in times:
        var = 2.0 * t  # difference of two independent Brownian endpoints
        w1d = np.zeros_like(axes1d)
        K = max(1, int(np.ceil(7 * np.sqrt(var) / grid.L)) + 1)
        for j in range(-K, K + 1):
            w1d += np.exp(-0.5 * (axes1d + j * grid.L) ** 2 / var)
        w1d /= math.sqrt(2 * math.pi * var)
        weight = np.ones(grid.shape)
        for k in range(d):
            shape = [1] * d
            shape[k] = grid.n
            weight = weight * w1d.reshape(shape)
        out.append(float((R_mean * weight).sum() * grid.h**d))
    return np.array(out)
