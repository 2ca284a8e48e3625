"""Periodic finite-difference calculus and linear solves for divergence-form
operators lambda - (1/2) div(a grad) on a uniform torus grid.

Conventions
-----------
Scalar grid functions live on nodes x_i = i*h, i in {0..n-1}^d, with periodic
index arithmetic.  Edge quantities (coefficients, staggered gradients) live on
the edge from node i to node i+e_k and are stored at index i, one array per
direction.  The operator applies the standard 2d+1-point flux stencil

    (L u)_i = (1/2) sum_k [ a_k(i) (u_{i+e_k} - u_i) - a_k(i-e_k) (u_i - u_{i-e_k}) ] / h^2

with a_k the direction-k edge coefficient.  A constant symmetric matrix can be
supplied instead of a field, in which case off-diagonal entries are discretized
with centered cross differences.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import fft as sfft

from .errors import InvalidParameterError, SolverFailureError
from .util import atomic_write_bytes, atomic_write_text

def _fft_threads() -> int:
    # set HOMOLAB_FFT_WORKERS=1 when process-level parallelism is active
    env = os.environ.get("HOMOLAB_FFT_WORKERS")
    if env:
        return max(1, int(env))
    return min(os.cpu_count() or 1, 4)


DEFAULT_MAX_POINTS = 1 << 27


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice with n nodes per axis on [0, L)^d."""

    d: int
    n: int
    L: float
    max_points: int = DEFAULT_MAX_POINTS

    def __post_init__(self):
        if self.d < 1:
            raise InvalidParameterError(f"dimension must be >= 1, got {self.d}")
        if self.n < 4 or self.n % 2 != 0:
            raise InvalidParameterError(f"n must be even and >= 4, got {self.n}")
        if not (self.L > 0):
            raise InvalidParameterError(f"period must be positive, got {self.L}")
        if self.n**self.d > self.max_points:
            raise InvalidParameterError(
                f"grid has {self.n**self.d} points, over the declared budget {self.max_points}"
            )

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def npoints(self) -> int:
        return self.n**self.d

    def axis_coords(self, axis_offset: float = 0.0) -> np.ndarray:
        """1D node coordinates, optionally shifted by axis_offset*h."""
        return (np.arange(self.n) + axis_offset) * self.h

    def coords(self, offsets=None) -> tuple[np.ndarray, ...]:
        """Sparse broadcastable coordinate arrays, offsets in units of h."""
        if offsets is None:
            offsets = (0.0,) * self.d
        out = []
        for k in range(self.d):
            shape = [1] * self.d
            shape[k] = self.n
            out.append(self.axis_coords(offsets[k]).reshape(shape))
        return tuple(out)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        return np.mod(x, self.L)


@dataclass
class GridFunction:
    """Scalar or vector field sampled on a Grid.

    Scalar values have shape (n,)*d; vector values (d,)+(n,)*d.
    """

    grid: Grid
    values: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape == self.grid.shape:
            pass
        elif self.values.shape == (self.grid.d,) + self.grid.shape:
            pass
        else:
            raise InvalidParameterError(
                f"values shape {self.values.shape} incompatible with grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("grid function contains non-finite values")

    @property
    def kind(self) -> str:
        return "scalar" if self.values.shape == self.grid.shape else "vector"

    def mean(self) -> float | np.ndarray:
        if self.kind == "scalar":
            return float(self.values.mean())
        return self.values.mean(axis=tuple(range(1, self.grid.d + 1)))

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy(), dict(self.meta))

    @staticmethod
    def zeros(grid: Grid, kind: str = "scalar") -> "GridFunction":
        shape = grid.shape if kind == "scalar" else (grid.d,) + grid.shape
        return GridFunction(grid, np.zeros(shape))

    def save(self, path_prefix: str) -> None:
        """Row-major little-endian float64 binary plus a JSON sidecar."""
        data = np.ascontiguousarray(self.values, dtype="<f8")
        atomic_write_bytes(path_prefix + ".bin", data.tobytes())
        sidecar = {
            "d": self.grid.d,
            "n": self.grid.n,
            "L": self.grid.L,
            "kind": self.kind,
        }
        atomic_write_text(path_prefix + ".json", json.dumps(sidecar, indent=2) + "\n")

    @staticmethod
    def load(path_prefix: str) -> "GridFunction":
        with open(path_prefix + ".json", "r", encoding="utf-8") as f:
            sc = json.load(f)
        grid = Grid(int(sc["d"]), int(sc["n"]), float(sc["L"]))
        raw = np.fromfile(path_prefix + ".bin", dtype="<f8")
        shape = grid.shape if sc["kind"] == "scalar" else (grid.d,) + grid.shape
        return GridFunction(grid, raw.reshape(shape))


# ---------------------------------------------------------------------------
# Discrete calculus
# ---------------------------------------------------------------------------


def edge_gradient(u: GridFunction) -> np.ndarray:
    """Forward (staggered) differences onto edges, shape (d,)+(n,)*d."""
    g = u.grid
    v = u.values
    out = np.empty((g.d,) + g.shape)
    for k in range(g.d):
        out[k] = (np.roll(v, -1, axis=k) - v) / g.h
    return out


def edge_divergence(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Backward-difference divergence of an edge field; minus the adjoint of
    edge_gradient under the grid inner product."""
    out = np.zeros(grid.shape)
    for k in range(grid.d):
        out += (w[k] - np.roll(w[k], 1, axis=k)) / grid.h
    return out


def grad(u: GridFunction) -> GridFunction:
    """Centered periodic gradient, collocated on nodes."""
    if u.kind != "scalar":
        raise InvalidParameterError("grad expects a scalar grid function")
    g = u.grid
    out = np.empty((g.d,) + g.shape)
    for k in range(g.d):
        out[k] = (np.roll(u.values, -1, axis=k) - np.roll(u.values, 1, axis=k)) / (2 * g.h)
    return GridFunction(g, out)


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------


class DivFormOperator:
    """lambda - (1/2) div(a grad) with staggered edge coefficients.

    Either `edge_coeffs` (shape (d,)+(n,)*d, direction-k coefficient on the
    k-edge) or `const_matrix` (constant SPD matrix, cross terms by centered
    differences) must be given.
    """

    def __init__(self, grid: Grid, lam: float = 0.0, edge_coeffs=None, const_matrix=None):
        if lam < 0:
            raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
        if (edge_coeffs is None) == (const_matrix is None):
            raise InvalidParameterError("provide exactly one of edge_coeffs, const_matrix")
        self.grid = grid
        self.lam = float(lam)
        if const_matrix is not None:
            A = np.asarray(const_matrix, dtype=np.float64)
            if A.shape != (grid.d, grid.d):
                raise InvalidParameterError(f"constant matrix must be {grid.d}x{grid.d}")
            if not np.allclose(A, A.T, atol=1e-13):
                raise InvalidParameterError("constant matrix must be symmetric")
            if np.linalg.eigvalsh(A).min() <= 0:
                raise InvalidParameterError("constant matrix must be positive definite")
            self.const_matrix = A
            self.edge_coeffs = np.broadcast_to(
                A.diagonal().reshape((grid.d,) + (1,) * grid.d), (grid.d,) + grid.shape
            )
        else:
            self.const_matrix = None
            ec = np.asarray(edge_coeffs, dtype=np.float64)
            if ec.shape != (grid.d,) + grid.shape:
                raise InvalidParameterError("edge_coeffs must have shape (d,)+(n,)*d")
            if ec.min() <= 0:
                raise InvalidParameterError("edge coefficients must be positive")
            self.edge_coeffs = ec
        self._symbol_cache: dict[float, np.ndarray] = {}

    def with_lambda(self, lam: float) -> "DivFormOperator":
        op = object.__new__(DivFormOperator)
        op.grid = self.grid
        op.lam = float(lam)
        op.const_matrix = self.const_matrix
        op.edge_coeffs = self.edge_coeffs
        op._symbol_cache = self._symbol_cache
        return op

    # -- action ------------------------------------------------------------

    def apply_L(self, v: np.ndarray) -> np.ndarray:
        """Generator part (1/2) div(a grad v)."""
        g = self.grid
        h2 = g.h * g.h
        out = np.zeros(g.shape)
        ec = self.edge_coeffs
        for k in range(g.d):
            flux = ec[k] * (np.roll(v, -1, axis=k) - v)
            out += (flux - np.roll(flux, 1, axis=k)) / h2
        if self.const_matrix is not None:
            A = self.const_matrix
            for i in range(g.d):
                for j in range(i + 1, g.d):
                    if A[i, j] == 0.0:
                        continue
                    vp = np.roll(v, -1, axis=i)
                    vm = np.roll(v, 1, axis=i)
                    cross = (
                        np.roll(vp, -1, axis=j)
                        - np.roll(vp, 1, axis=j)
                        - np.roll(vm, -1, axis=j)
                        + np.roll(vm, 1, axis=j)
                    ) / (4 * h2)
                    out += 2 * A[i, j] * cross
        return 0.5 * out

    def apply(self, u: GridFunction | np.ndarray) -> GridFunction:
        """(lambda - L) u."""
        v = u.values if isinstance(u, GridFunction) else np.asarray(u)
        res = self.lam * v - self.apply_L(v)
        if isinstance(u, GridFunction):
            return GridFunction(self.grid, res)
        return res

    def bilinear(self, u: GridFunction, v: GridFunction) -> float:
        """<u, (lambda - L) v> under the normalized grid inner product."""
        return float(np.vdot(u.values, self.apply(v).values).real / self.grid.npoints)

    # -- constant-coefficient symbol (used by the fft preconditioner) -------

    def _mean_diag(self) -> np.ndarray:
        if self.const_matrix is not None:
            return self.const_matrix.diagonal().copy()
        return self.edge_coeffs.reshape(self.grid.d, -1).mean(axis=1)

    def precond_symbol(self, half: bool = False) -> np.ndarray:
        """Fourier symbol of lambda - (1/2) div(abar grad) with abar the mean
        diagonal coefficient; exact inverse when coefficients are constant.
        half=True returns the rfft half-spectrum slice."""
        key = (self.lam, half)
        sym = self._symbol_cache.get(key)
        if sym is not None:
            return sym
        if half:
            full = self.precond_symbol(half=False)
            sym = np.ascontiguousarray(full[..., : self.grid.n // 2 + 1])
            self._symbol_cache[key] = sym
            return sym
        g = self.grid
        abar = self._mean_diag()
        sym = np.full(g.shape, self.lam, dtype=np.float64)
        for k in range(g.d):
            kk = np.fft.fftfreq(g.n, d=1.0 / g.n)  # integer frequencies
            s = (2.0 / g.h * np.sin(np.pi * kk / g.n)) ** 2
            shape = [1] * g.d
            shape[k] = g.n
            sym = sym + 0.5 * abar[k] * s.reshape(shape)
        if self.const_matrix is not None:
            A = self.const_matrix
            sins = []
            for k in range(g.d):
                kk = np.fft.fftfreq(g.n, d=1.0 / g.n)
                shape = [1] * g.d
                shape[k] = g.n
                sins.append((np.sin(2 * np.pi * kk / g.n) / g.h).reshape(shape))
            for i in range(g.d):
                for j in range(i + 1, g.d):
                    if A[i, j] != 0.0:
                        sym = sym + A[i, j] * sins[i] * sins[j]
        self._symbol_cache[key] = sym
        return sym


def assemble(field, grid: Grid, lam: float = 0.0, edge_rule: str = "midpoint") -> DivFormOperator:
    """Build the flux-stencil operator for a coefficient field on a grid.

    The grid period must equal the field period (an integer number of field
    periods is accepted, since such a field is grid-periodic too).

    edge_rule: "midpoint" evaluates a at edge midpoints; "harmonic" uses the
    harmonic mean of the two node values.
    """
    ratio = grid.L / field.L
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise InvalidParameterError(
            f"grid period {grid.L} is not a multiple of field period {field.L}"
        )
    if getattr(field, "constant_matrix", None) is not None:
        return DivFormOperator(grid, lam, const_matrix=field.constant_matrix)
    d = grid.d
    ec = np.empty((d,) + grid.shape)
    if edge_rule == "midpoint":
        for k in range(d):
            offs = [0.0] * d
            offs[k] = 0.5
            diag = field.diag_mesh(grid, offsets=tuple(offs))
            ec[k] = diag[k]
    elif edge_rule == "harmonic":
        diag = field.diag_mesh(grid)
        for k in range(d):
            ak = diag[k]
            ec[k] = 2.0 / (1.0 / ak + 1.0 / np.roll(ak, -1, axis=k))
    else:
        raise InvalidParameterError(f"unknown edge rule {edge_rule!r}")
    return DivFormOperator(grid, lam, edge_coeffs=ec)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def solve(
    op: DivFormOperator,
    rhs: GridFunction,
    tol: float = 1e-9,
    max_iter: int | None = None,
    precond: str = "fft",
    x0: GridFunction | None = None,
) -> GridFunction:
    """Preconditioned CG solve of (lambda - L) u = rhs.

    At lambda = 0 the rhs must have zero mean and the zero-mean projection is
    enforced on every iterate; the solution then has zero mean.  Returns a
    GridFunction with convergence info in .meta; raises SolverFailureError
    (carrying the residual history) on non-convergence.
    """
    if tol <= 0:
        raise InvalidParameterError("tol must be positive")
    g = op.grid
    b = rhs.values.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        out = GridFunction.zeros(g)
        out.meta.update(iterations=0, relative_residual=0.0)
        return out
    singular = op.lam == 0.0
    if singular:
        bmean = float(b.mean())
        if abs(bmean) * np.sqrt(g.npoints) > 1e-10 * bnorm:
            raise InvalidParameterError(
                f"lambda = 0 requires zero-mean rhs; |mean| = {abs(bmean):.3e}"
            )
        b -= b.mean()

    if precond == "fft":
        sym = op.precond_symbol(half=True).copy()
        if singular:
            sym.flat[0] = 1.0  # zero mode projected out separately

        def apply_M(r):
            z = sfft.irfftn(
                sfft.rfftn(r, workers=_fft_threads()) / sym, s=g.shape, workers=_fft_threads()
            )
            if singular:
                z -= z.mean()
            return z

    elif precond == "jacobi":
        diag = np.full(g.shape, op.lam)
        for k in range(g.d):
            diag = diag + 0.5 * (op.edge_coeffs[k] + np.roll(op.edge_coeffs[k], 1, axis=k)) / (
                g.h * g.h
            )

        def apply_M(r):
            z = r / diag
            if singular:
                z -= z.mean()
            return z

    else:
        raise InvalidParameterError(f"unknown preconditioner {precond!r}")

    if max_iter is None:
        max_iter = max(200, 10 * g.npoints)

    def dot(u, v):
        return float(np.dot(u.ravel(), v.ravel()))

    x = np.zeros_like(b) if x0 is None else x0.values.astype(np.float64).copy()
    if singular and x0 is not None:
        x -= x.mean()
    r = b - op.apply(x)
    if singular:
        r -= r.mean()
    history = [np.sqrt(dot(r, r)) / bnorm]
    if history[-1] <= tol:
        out = GridFunction(g, x)
        out.meta.update(iterations=0, relative_residual=history[-1])
        return out
    z = apply_M(r)
    p = z.copy()
    rz = dot(r, z)
    for it in range(1, max_iter + 1):
        Ap = op.apply(p)
        if singular:
            Ap -= Ap.mean()
        alpha = rz / dot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        if singular:
            x -= x.mean()
            r -= r.mean()
        rel = np.sqrt(dot(r, r)) / bnorm
        history.append(rel)
        if rel <= tol:
            out = GridFunction(g, x)
            out.meta.update(iterations=it, relative_residual=rel)
            return out
        z = apply_M(r)
        rz_new = dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        p *= beta
        p += z
    raise SolverFailureError(
        f"CG did not reach tol {tol} in {max_iter} iterations (residual {history[-1]:.3e})",
        residual_history=history,
    )


# ---------------------------------------------------------------------------
# Periodic cubic-spline interpolation
# ---------------------------------------------------------------------------

_B3_SYMBOL_NUM = None


def _spline_symbol(n: int) -> np.ndarray:
    k = np.arange(n)
    return (4.0 + 2.0 * np.cos(2 * np.pi * k / n)) / 6.0


def spline_prefilter(u: GridFunction) -> GridFunction:
    """Cubic B-spline coefficients of a periodic grid function (FFT solve)."""
    g = u.grid
    vals = u.values
    comps = vals[None] if u.kind == "scalar" else vals
    out = np.empty_like(comps)
    sym = _spline_symbol(g.n)
    for c in range(comps.shape[0]):
        vh = sfft.fftn(comps[c], workers=_fft_threads())
        for k in range(g.d):
            shape = [1] * g.d
            shape[k] = g.n
            vh = vh / sym.reshape(shape)
        out[c] = sfft.ifftn(vh, workers=_fft_threads()).real
    res = out[0] if u.kind == "scalar" else out
    gf = GridFunction(g, res)
    gf.meta["spline_coeffs"] = True
    return gf


def _b3_weights(u: np.ndarray) -> np.ndarray:
    """Cubic B-spline weights for offsets (-1, 0, 1, 2); u in [0,1)."""
    w = np.empty((4,) + u.shape)
    w[0] = (1 - u) ** 3 / 6.0
    w[1] = (3 * u**3 - 6 * u**2 + 4) / 6.0
    w[2] = (-3 * u**3 + 3 * u**2 + 3 * u + 1) / 6.0
    w[3] = u**3 / 6.0
    return w


def _b3_dweights(u: np.ndarray) -> np.ndarray:
    w = np.empty((4,) + u.shape)
    w[0] = -((1 - u) ** 2) / 2.0
    w[1] = (3 * u**2 - 4 * u) / 2.0
    w[2] = (-3 * u**2 + 2 * u + 1) / 2.0
    w[3] = u**2 / 2.0
    return w


def spline_eval(coeffs: GridFunction, points: np.ndarray, deriv: int | None = None) -> np.ndarray:
    """Evaluate a prefiltered periodic cubic spline at arbitrary points.

    points: (N, d).  deriv=None returns values (scalar -> (N,), vector ->
    (ncomp, N)); deriv=k returns the k-th partial derivative.
    """
    g = coeffs.grid
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != g.d:
        raise InvalidParameterError(f"points must be (N, {g.d})")
    t = pts / g.h
    base = np.floor(t).astype(np.int64)
    frac = t - base
    weights = []
    for k in range(g.d):
        if deriv == k:
            weights.append(_b3_dweights(frac[:, k]) / g.h)
        else:
            weights.append(_b3_weights(frac[:, k]))
    idx = [(base[:, k][None, :] + np.arange(-1, 3)[:, None]) % g.n for k in range(g.d)]
    comps = coeffs.values[None] if coeffs.kind == "scalar" else coeffs.values
    ncomp = comps.shape[0]
    out = np.zeros((ncomp, pts.shape[0]))
    for combo in np.ndindex(*(4,) * g.d):
        w = weights[0][combo[0]]
        for k in range(1, g.d):
            w = w * weights[k][combo[k]]
        gather = tuple(idx[k][combo[k]] for k in range(g.d))
        for c in range(ncomp):
            out[c] += w * comps[c][gather]
    return out[0] if coeffs.kind == "scalar" else out
