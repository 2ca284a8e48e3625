"""Stationary random and periodic coefficient fields with analytically
differentiable sample paths and finite range of dependence.

Every model produces a symmetric matrix a(x) with eigenvalues inside
[c_minus, c_plus], periodic with period L per axis, plus the analytic drift
b(x) = (1/2) div a(x) in closed form (no finite differencing).  Variable
fields are diagonal by construction; the constant model may carry a full SPD
matrix.  Randomness is organized in per-cell counter-based substreams so that
resampling one cell leaves every other cell bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .util import substream, write_csv

_CELL_TAG = 1
_CHECKER_TAG = 2
_SMOOTH_TAG = 3

BUMP_RADIUS = 0.5


# ---------------------------------------------------------------------------
# Mark laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkLaw:
    """Parametric scalar mark law: uniform(lo,hi), constant(v), exponential(rate)."""

    kind: str
    params: tuple

    def sample(self, rng, size: int) -> np.ndarray:
        if self.kind == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, size)
        if self.kind == "constant":
            return np.full(size, self.params[0])
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.params[0], size)
        raise InvalidParameterError(f"unknown mark law {self.kind!r}")

    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        if self.kind == "constant":
            return self.params[0]
        return 1.0 / self.params[0]

    def second_moment(self) -> float:
        if self.kind == "uniform":
            lo, hi = self.params
            return (hi**3 - lo**3) / (3 * (hi - lo)) if hi > lo else lo * lo
        if self.kind == "constant":
            return self.params[0] ** 2
        return 2.0 / self.params[0] ** 2

    def descriptor(self) -> str:
        return self.kind + ":" + ",".join(format(p, ".17g") for p in self.params)

    @staticmethod
    def parse(text: str) -> "MarkLaw":
        kind, _, rest = text.partition(":")
        params = tuple(float(t) for t in rest.split(",")) if rest else ()
        if kind == "uniform":
            if len(params) != 2 or params[1] <= params[0]:
                raise InvalidParameterError(f"bad uniform mark law {text!r}")
        elif kind == "constant":
            if len(params) != 1:
                raise InvalidParameterError(f"bad constant mark law {text!r}")
        elif kind == "exponential":
            if len(params) != 1 or params[0] <= 0:
                raise InvalidParameterError(f"bad exponential mark law {text!r}")
        else:
            raise InvalidParameterError(f"unknown mark law {text!r}")
        return MarkLaw(kind, params)


DEFAULT_MARK_LAW = MarkLaw("uniform", (0.0, 1.0))


# ---------------------------------------------------------------------------
# Poisson cloud
# ---------------------------------------------------------------------------


class PoissonCloud:
    """Marked Poisson configuration on the torus [0, L)^d.

    Points are generated per unit-cell from a counter-based substream keyed on
    (seed, cell index, generation), so any cell can be independently resampled
    without touching the others.
    """

    def __init__(self, d, box_length, intensity, mark_law=DEFAULT_MARK_LAW, seed=0, cell_size=1.0, generations=None):
        if box_length <= 0:
            raise InvalidParameterError(f"box length must be positive, got {box_length}")
        if intensity < 0:
            raise InvalidParameterError(f"intensity must be >= 0, got {intensity}")
        if cell_size <= 0:
            raise InvalidParameterError(f"cell size must be positive, got {cell_size}")
        ncells = box_length / cell_size
        if abs(ncells - round(ncells)) > 1e-9 or round(ncells) < 1:
            raise InvalidParameterError("box length must be an integer number of cells")
        self.d = int(d)
        self.L = float(box_length)
        self.intensity = float(intensity)
        self.mark_law = mark_law
        self.seed = int(seed)
        self.cell_size = float(cell_size)
        self.ncells_axis = int(round(ncells))
        self.generations = dict(generations or {})
        self._cells = {}
        for idx in np.ndindex(*(self.ncells_axis,) * self.d):
            self._cells[idx] = self._sample_cell(idx, self.generations.get(idx, 0))
        marks = [c[0] for c in self._cells.values()]
        locs = [c[1] for c in self._cells.values()]
        self.marks = np.concatenate(marks) if marks else np.zeros(0)
        self.locations = np.concatenate(locs) if locs else np.zeros((0, self.d))
        self._padded = None

    def _sample_cell(self, idx, generation):
        lin = 0
        for i in idx:
            lin = lin * self.ncells_axis + int(i)
        rng = substream(self.seed, _CELL_TAG, lin, generation)
        count = int(rng.poisson(self.intensity * self.cell_size**self.d))
        origin = np.array(idx, dtype=np.float64) * self.cell_size
        locs = origin + rng.random((count, self.d)) * self.cell_size
        marks = self.mark_law.sample(rng, count)
        return marks, locs

    @property
    def count(self) -> int:
        return self.marks.size

    def cell_points(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self._cells[tuple(int(i) for i in idx)]

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        return np.floor(np.mod(x, self.L) / self.cell_size).astype(np.int64)

    def resampled(self, idx, seed: int) -> "PoissonCloud":
        idx = tuple(int(i) for i in np.atleast_1d(np.asarray(idx)))
        if len(idx) != self.d or any(i < 0 or i >= self.ncells_axis for i in idx):
            raise InvalidParameterError(f"cell index {idx} outside the box")
        gens = dict(self.generations)
        gens[idx] = int(seed)
        return PoissonCloud(self.d, self.L, self.intensity, self.mark_law, self.seed, self.cell_size, gens)

    def padded_cells(self):
        """Per-cell point arrays padded to a common width, for batched queries."""
        if self._padded is None:
            C = self.ncells_axis
            maxn = max((c[1].shape[0] for c in self._cells.values()), default=0)
            maxn = max(maxn, 1)
            shape = (C,) * self.d
            locs = np.zeros(shape + (maxn, self.d))
            marks = np.zeros(shape + (maxn,))
            mask = np.zeros(shape + (maxn,), dtype=bool)
            for idx, (m, z) in self._cells.items():
                k = z.shape[0]
                if k:
                    locs[idx][:k] = z
                    marks[idx][:k] = m
                    mask[idx][:k] = True
            self._padded = (marks, locs, mask)
        return self._padded

    def to_csv(self, path: str) -> None:
        header = ["mark"] + [f"x{k}" for k in range(self.d)]
        rows = [[self.marks[i]] + list(self.locations[i]) for i in range(self.count)]
        write_csv(path, header, rows)


def sample_cloud(box_length, intensity, mark_law=DEFAULT_MARK_LAW, seed=0, d=3, cell_size=1.0) -> PoissonCloud:
    """Draw a marked Poisson cloud on [0, box_length)^d."""
    if box_length <= 0 or intensity < 0:
        raise InvalidParameterError("box length must be > 0 and intensity >= 0")
    if isinstance(mark_law, str):
        mark_law = MarkLaw.parse(mark_law)
    return PoissonCloud(d, box_length, intensity, mark_law, seed, cell_size)


def resample_cell(cloud: PoissonCloud, k, seed: int) -> PoissonCloud:
    """Replace the points of cell k by a fresh sample with the same law."""
    return cloud.resampled(k, seed)


# ---------------------------------------------------------------------------
# Bump profile: C^2 compactly supported radial bump of radius r
# ---------------------------------------------------------------------------


def bump_profile(u: np.ndarray) -> np.ndarray:
    """(1-u^2)^3 on [0,1), zero outside; C^2 across the support boundary."""
    v = np.clip(1.0 - u * u, 0.0, None)
    return v**3


def bump_profile_deriv(u: np.ndarray) -> np.ndarray:
    v = np.clip(1.0 - u * u, 0.0, None)
    return -6.0 * u * v**2


def _bump_shape_integral(d: int, power: int) -> float:
    """Integral over R^d of bump_profile(|z|/r)^power with r = 1."""
    # int_0^1 (1-u^2)^(3p) u^(d-1) du = B(d/2, 3p+1)/2
    surf = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    beta = math.gamma(d / 2) * math.gamma(3 * power + 1) / math.gamma(d / 2 + 3 * power + 1) / 2
    return surf * beta


# ---------------------------------------------------------------------------
# Cardinal cubic B-spline (mollifier for the checkerboard)
# ---------------------------------------------------------------------------


def bspline3(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    out = np.zeros_like(a)
    m1 = a < 1
    m2 = (a >= 1) & (a < 2)
    out[m1] = (4 - 6 * a[m1] ** 2 + 3 * a[m1] ** 3) / 6.0
    out[m2] = (2 - a[m2]) ** 3 / 6.0
    return out


def bspline3_deriv(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    s = np.sign(t)
    out = np.zeros_like(a)
    m1 = a < 1
    m2 = (a >= 1) & (a < 2)
    out[m1] = s[m1] * (-12 * a[m1] + 9 * a[m1] ** 2) / 6.0
    out[m2] = s[m2] * (-3 * (2 - a[m2]) ** 2) / 6.0
    return out


# ---------------------------------------------------------------------------
# Field base
# ---------------------------------------------------------------------------


class CoefficientField:
    """Evaluator of a(x) (diagonal unless constant-matrix) and its drift."""

    model = "abstract"
    is_smooth = True

    def __init__(self, d, L, c_minus, c_plus, seed=0):
        if d < 1:
            raise InvalidParameterError("dimension must be >= 1")
        if not (0 < c_minus < c_plus):
            raise InvalidParameterError("need 0 < c_minus < c_plus")
        if L <= 0:
            raise InvalidParameterError("period must be positive")
        self.d = int(d)
        self.L = float(L)
        self.c_minus = float(c_minus)
        self.c_plus = float(c_plus)
        self.seed = int(seed)
        self.R_dep = 0.0
        self.constant_matrix = None
        self.notes = ""

    # -- per-model hooks -----------------------------------------------------

    def _diag_axes(self, axes):
        raise NotImplementedError

    def _drift_axes(self, axes):
        raise NotImplementedError

    # -- generic API ----------------------------------------------------------

    def diag_mesh(self, grid, offsets=None) -> np.ndarray:
        """Diagonal entries of a on grid nodes (optionally edge-shifted),
        shape (d,) + grid.shape."""
        axes = [np.mod(c, self.L) for c in grid.coords(offsets)]
        vals = self._diag_axes(axes)
        return np.ascontiguousarray(np.broadcast_to(vals, (self.d,) + grid.shape))

    def drift_mesh(self, grid, offsets=None) -> np.ndarray:
        axes = [np.mod(c, self.L) for c in grid.coords(offsets)]
        vals = self._drift_axes(axes)
        return np.ascontiguousarray(np.broadcast_to(vals, (self.d,) + grid.shape))

    def evaluate_batch(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(a_diag, b) at arbitrary points, shapes (N, d)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("evaluation point is not finite")
        axes = [np.mod(pts[:, k], self.L) for k in range(self.d)]
        a = np.broadcast_to(self._diag_axes(axes), (self.d, pts.shape[0])).T
        b = np.broadcast_to(self._drift_axes(axes), (self.d, pts.shape[0])).T
        return np.ascontiguousarray(a), np.ascontiguousarray(b)

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Full symmetric matrix a(x) and drift b(x) at one point."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError("evaluation point is not finite")
        if self.constant_matrix is not None:
            return self.constant_matrix.copy(), np.zeros(self.d)
        ad, b = self.evaluate_batch(x[None, :])
        return np.diag(ad[0]), b[0]

    def rescaled(self, eps: float) -> "RescaledField":
        return RescaledField(self, eps)

    # -- serialization ----------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "model": self.model,
            "d": str(self.d),
            "L": format(self.L, ".17g"),
            "c_minus": format(self.c_minus, ".17g"),
            "c_plus": format(self.c_plus, ".17g"),
            "seed": str(self.seed),
        }

    @staticmethod
    def from_config(cfg: dict) -> "CoefficientField":
        return make_field(**{k: v for k, v in cfg.items()})


class RescaledField:
    """View of a base field evaluated at x/eps: a_eps(x) = a(x/eps),
    b_eps(x) = (1/eps) b(x/eps).  Period eps*L."""

    def __init__(self, base: CoefficientField, eps: float):
        if not (0 < eps <= 1):
            raise InvalidParameterError(f"eps must be in (0, 1], got {eps}")
        self.base = base
        self.eps = float(eps)
        self.d = base.d
        self.L = base.L * eps
        self.c_minus = base.c_minus
        self.c_plus = base.c_plus
        self.is_smooth = base.is_smooth
        self.constant_matrix = base.constant_matrix

    def diag_mesh(self, grid, offsets=None):
        axes = [np.mod(c / self.eps, self.base.L) for c in grid.coords(offsets)]
        vals = self.base._diag_axes(axes)
        return np.ascontiguousarray(np.broadcast_to(vals, (self.d,) + grid.shape))

    def drift_mesh(self, grid, offsets=None):
        axes = [np.mod(c / self.eps, self.base.L) for c in grid.coords(offsets)]
        vals = self.base._drift_axes(axes)
        return np.ascontiguousarray(np.broadcast_to(vals, (self.d,) + grid.shape)) / self.eps

    def evaluate_batch(self, points):
        a, b = self.base.evaluate_batch(np.asarray(points) / self.eps)
        return a, b / self.eps


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class ConstantField(CoefficientField):
    """a(x) = A constant SPD; b = 0."""

    model = "constant"

    def __init__(self, d, matrix=None, value=1.0, L=1.0, c_minus=None, c_plus=None, seed=0):
        if matrix is None:
            matrix = np.eye(d) * float(value)
        A = np.asarray(matrix, dtype=np.float64)
        if A.shape != (d, d) or not np.allclose(A, A.T, atol=1e-13):
            raise InvalidParameterError("constant field needs a symmetric d x d matrix")
        ev = np.linalg.eigvalsh(A)
        if ev.min() <= 0:
            raise InvalidParameterError("constant matrix must be positive definite")
        cm = float(ev.min()) if c_minus is None else float(c_minus)
        cp = float(ev.max()) if c_plus is None else float(c_plus)
        super().__init__(d, L, min(cm, cp * 0.999999), max(cp, cm * 1.000001), seed)
        self.constant_matrix = A
        self.R_dep = 0.0

    def _diag_axes(self, axes):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        return np.broadcast_to(self.constant_matrix.diagonal().reshape((self.d,) + (1,) * len(shape)), (self.d,) + shape)

    def _drift_axes(self, axes):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        return np.zeros((self.d,) + shape)

    def to_config(self):
        cfg = super().to_config()
        cfg["matrix"] = ";".join(",".join(format(v, ".17g") for v in row) for row in self.constant_matrix)
        return cfg


class LaminateField(CoefficientField):
    """a depends on x_1 only: scalar alpha(x_1)*I or diag(alpha, beta, ..., beta).

    profile "sin": alpha = mid + amp*sin(2*pi*freq*x/L + phase), analytic drift.
    profile "twophase": alpha = v1 on [0, L/2), v2 on [L/2, L); discontinuous,
    so no analytic drift (is_smooth = False, b reported as 0 a.e.).
    """

    model = "laminate"

    def __init__(self, d, L=1.0, profile="sin", mid=2.5, amp=0.3, freq=1, phase=0.0,
                 values=(1.0, 4.0), beta=None, scalar=True, c_minus=None, c_plus=None, seed=0):
        if profile == "sin":
            if amp < 0 or amp >= mid:
                raise InvalidParameterError("need 0 <= amp < mid for ellipticity")
            lo, hi = mid - amp, mid + amp
        elif profile == "twophase":
            lo, hi = min(values), max(values)
            if lo <= 0:
                raise InvalidParameterError("two-phase values must be positive")
        else:
            raise InvalidParameterError(f"unknown laminate profile {profile!r}")
        if beta is not None:
            lo, hi = min(lo, beta), max(hi, beta)
        cm = lo if c_minus is None else c_minus
        cp = hi if c_plus is None else c_plus
        super().__init__(d, L, cm, cp, seed)
        self.profile = profile
        self.mid, self.amp, self.freq, self.phase = float(mid), float(amp), int(freq), float(phase)
        self.values = (float(values[0]), float(values[1]))
        self.scalar = bool(scalar)
        self.beta = float(beta) if beta is not None else None
        self.is_smooth = profile == "sin"
        self.R_dep = 0.0

    def alpha(self, x1: np.ndarray) -> np.ndarray:
        if self.profile == "sin":
            return self.mid + self.amp * np.sin(2 * np.pi * self.freq * x1 / self.L + self.phase)
        v1, v2 = self.values
        return np.where(np.mod(x1, self.L) < self.L / 2, v1, v2)

    def alpha_prime(self, x1: np.ndarray) -> np.ndarray:
        if self.profile == "sin":
            w = 2 * np.pi * self.freq / self.L
            return self.amp * w * np.cos(w * x1 + self.phase)
        return np.zeros_like(x1)

    def _diag_axes(self, axes):
        al = self.alpha(axes[0])
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        out = np.empty((self.d,) + shape)
        out[0] = np.broadcast_to(al, shape)
        rest = al if self.scalar else (self.beta if self.beta is not None else self.mid)
        for k in range(1, self.d):
            out[k] = np.broadcast_to(rest, shape)
        return out

    def _drift_axes(self, axes):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        out = np.zeros((self.d,) + shape)
        out[0] = np.broadcast_to(0.5 * self.alpha_prime(axes[0]), shape)
        return out

    def to_config(self):
        cfg = super().to_config()
        cfg.update(profile=self.profile, scalar=str(self.scalar))
        if self.profile == "sin":
            cfg.update(mid=format(self.mid, ".17g"), amp=format(self.amp, ".17g"),
                       freq=str(self.freq), phase=format(self.phase, ".17g"))
        else:
            cfg["values"] = ",".join(format(v, ".17g") for v in self.values)
        if self.beta is not None:
            cfg["beta"] = format(self.beta, ".17g")
        return cfg


class PeriodicSmoothField(CoefficientField):
    """Deterministic smooth periodic diagonal field.

    Each diagonal entry is F(S_k(x)) where S_k is a small random trigonometric
    polynomial (coefficients frozen from the seed) and F is a tanh saturation
    into (c_minus, c_plus).
    """

    model = "periodic-smooth"

    def __init__(self, d, L=1.0, c_minus=1.0, c_plus=3.0, seed=0, n_modes=3, roughness=1.0):
        super().__init__(d, L, c_minus, c_plus, seed)
        rng = substream(seed, _SMOOTH_TAG, 0, 0)
        self.n_modes = int(n_modes)
        self.roughness = float(roughness)
        # integer wavevectors with entries in {0,1,2} on the first min(d,3)
        # axes, excluding 0
        span = min(d, 3)
        qs = [q for q in np.ndindex(*(3,) * span) if any(q)]
        self.modes = []
        for k in range(d):
            rows = []
            for _ in range(self.n_modes):
                q = np.zeros(d, dtype=np.int64)
                q[:span] = np.array(qs[rng.integers(0, len(qs))])
                amp = roughness * rng.uniform(0.4, 1.0) / (1.0 + np.sum(q * q))
                phase = rng.uniform(0, 2 * np.pi)
                rows.append((q, amp, phase))
            self.modes.append(rows)
        self.R_dep = 0.0

    def _F(self, s):
        return self.c_minus + (self.c_plus - self.c_minus) * 0.5 * (1 + np.tanh(s))

    def _Fp(self, s):
        return (self.c_plus - self.c_minus) * 0.5 / np.cosh(s) ** 2

    def _S(self, axes, k):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        s = np.zeros(shape)
        for q, amp, phase in self.modes[k]:
            arg = phase
            for j in range(self.d):
                if q[j]:
                    arg = arg + 2 * np.pi * q[j] * axes[j] / self.L
            s = s + amp * np.sin(arg)
        return s

    def _dS(self, axes, k, j):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        s = np.zeros(shape)
        for q, amp, phase in self.modes[k]:
            if not q[j]:
                continue
            arg = phase
            for i in range(self.d):
                if q[i]:
                    arg = arg + 2 * np.pi * q[i] * axes[i] / self.L
            s = s + amp * (2 * np.pi * q[j] / self.L) * np.cos(arg)
        return s

    def _diag_axes(self, axes):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        out = np.empty((self.d,) + shape)
        for k in range(self.d):
            out[k] = self._F(self._S(axes, k))
        return out

    def _drift_axes(self, axes):
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        out = np.empty((self.d,) + shape)
        for k in range(self.d):
            out[k] = 0.5 * self._Fp(self._S(axes, k)) * self._dS(axes, k, k)
        return out

    def to_config(self):
        cfg = super().to_config()
        cfg.update(n_modes=str(self.n_modes), roughness=format(self.roughness, ".17g"))
        return cfg


class MollifiedCheckerboardField(CoefficientField):
    """i.i.d. unit-cell values mollified by the cardinal cubic B-spline.

    a(x) = (v1 + (v2-v1) * Sbar(x)) * I with Sbar the partition-of-unity
    B-spline blend of per-cell uniforms; C^2 with analytic gradient.  The raw
    checkerboard is only Z^d-stationary; the mollified version is used as an
    approximation and reports flag this.
    """

    model = "mollified-checkerboard"

    def __init__(self, d, L=8.0, values=(1.0, 4.0), seed=0, c_minus=None, c_plus=None, sharpness=4):
        v1, v2 = float(min(values)), float(max(values))
        if v1 <= 0:
            raise InvalidParameterError("checkerboard values must be positive")
        super().__init__(d, L, v1 if c_minus is None else c_minus, v2 if c_plus is None else c_plus, seed)
        if self.L != round(self.L) or self.L < 4:
            raise InvalidParameterError("checkerboard box must be an integer >= 4")
        self.values = (v1, v2)
        self.sharpness = int(sharpness)
        if self.sharpness < 1:
            raise InvalidParameterError("sharpness must be >= 1")
        C = int(round(self.L))
        self.ncells_axis = C
        u = np.empty((C,) * d)
        for idx in np.ndindex(*(C,) * d):
            lin = 0
            for i in idx:
                lin = lin * C + i
            # symmetric two-valued cells (the self-dual case in d = 2)
            u[idx] = 1.0 if substream(seed, _CHECKER_TAG, lin, 0).random() < 0.5 else 0.0
        self.cell_values = u
        # blend on a sharpness-refined subcell lattice: plateaus survive in
        # cell interiors, only bands of width ~2/sharpness are smoothed
        q = self.sharpness
        sub = u
        for ax in range(d):
            sub = np.repeat(sub, q, axis=ax)
        self._subcell_values = sub
        self.is_smooth = True
        self.R_dep = 2.0 * math.sqrt(d) / q
        self.notes = "mollified checkerboard: Z^d-stationary core, C^2 blend (approximation)"

    def _weight_matrix(self, xs: np.ndarray, deriv: bool) -> np.ndarray:
        q = self.sharpness
        centers = (np.arange(self.ncells_axis * q) + 0.5) / q
        diff = xs[:, None] - centers[None, :]
        diff = (diff + self.L / 2) % self.L - self.L / 2
        if deriv:
            return bspline3_deriv(diff * q) * q
        return bspline3(diff * q)

    def _blend(self, axes, deriv_axis=None):
        flat_axes = [np.asarray(a).ravel() for a in axes]
        mats = []
        for j in range(self.d):
            mats.append(self._weight_matrix(flat_axes[j], deriv=(deriv_axis == j)))
        shape = np.broadcast_shapes(*(np.asarray(a).shape for a in axes))
        if len(shape) == 1:
            # scattered point list: contract all axes pointwise
            letters = "klmpq"[: self.d]
            spec = ",".join(f"n{c}" for c in letters) + "," + letters + "->n"
            return np.einsum(spec, *mats, self._subcell_values)
        out = self._subcell_values
        # contract the cell tensor with one weight matrix per axis; tensordot
        # prepends the new axis, so the result comes out axis-reversed
        for j in range(self.d):
            out = np.tensordot(mats[j], out, axes=([1], [j]))
        out = np.transpose(out, axes=tuple(range(self.d))[::-1])
        return out.reshape(shape)

    def _sbar_mesh(self, axes, deriv_axis=None):
        return self._blend(axes, deriv_axis)

    def _diag_axes(self, axes):
        v1, v2 = self.values
        s = self._sbar_mesh(axes)
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        return np.broadcast_to(v1 + (v2 - v1) * s, (self.d,) + shape)

    def _drift_axes(self, axes):
        v1, v2 = self.values
        shape = np.broadcast_shapes(*(a.shape for a in axes))
        out = np.empty((self.d,) + shape)
        for k in range(self.d):
            out[k] = 0.5 * (v2 - v1) * self._sbar_mesh(axes, deriv_axis=k)
        return out

    def to_config(self):
        cfg = super().to_config()
        cfg["values"] = ",".join(format(v, ".17g") for v in self.values)
        cfg["sharpness"] = str(self.sharpness)
        return cfg


class PoissonBumpField(CoefficientField):
    """Shot-noise field a(x) = F(S(x)) I + diag(aniso) with
    S(x) = sum_i m_i g(x - z_i) over a marked Poisson cloud.

    g is the C^2 radial bump of radius `bump_radius` scaled by the mark; the
    optional skew factor (1 + 0.5 sin(w . z)) breaks z -> -z symmetry.  F is a
    tanh saturation keeping all eigenvalues inside [c_minus, c_plus].
    """

    model = "poisson-bump"

    def __init__(self, d, L=8.0, intensity=1.0, c_minus=0.5, c_plus=2.0, seed=0,
                 mark_law=DEFAULT_MARK_LAW, bump_radius=BUMP_RADIUS, skew=False,
                 aniso=None, cloud=None, map_center=None, map_width=None):
        super().__init__(d, L, c_minus, c_plus, seed)
        if isinstance(mark_law, str):
            mark_law = MarkLaw.parse(mark_law)
        self.mark_law = mark_law
        self.intensity = float(intensity)
        self.r = float(bump_radius)
        if not (0 < self.r <= L / 4):
            raise InvalidParameterError("bump radius must be in (0, L/4]")
        self.skew = bool(skew)
        self.skew_wave = np.zeros(d)
        if self.skew:
            self.skew_wave[0] = 2.5 * np.pi / self.r  # linear form inside the bump
        self.aniso = np.zeros(d) if aniso is None else np.asarray(aniso, dtype=np.float64)
        if self.aniso.shape != (d,):
            raise InvalidParameterError("aniso must have one entry per axis")
        pmin, pmax = float(min(self.aniso.min(), 0)), float(max(self.aniso.max(), 0))
        lo, hi = c_minus - pmin, c_plus - pmax
        if hi <= lo:
            raise InvalidParameterError("anisotropic perturbation too large for the band")
        self._lo, self._hi = lo, hi
        mean_s = intensity * mark_law.mean() * _bump_shape_integral(d, 1) * self.r**d
        var_s = intensity * mark_law.second_moment() * _bump_shape_integral(d, 2) * self.r**d
        self.map_center = mean_s if map_center is None else float(map_center)
        self.map_width = max(math.sqrt(var_s), 1e-3) if map_width is None else float(map_width)
        self.cloud = cloud if cloud is not None else PoissonCloud(d, L, intensity, mark_law, seed)
        self.R_dep = self.r
        self.is_smooth = True

    def with_cloud(self, cloud: PoissonCloud) -> "PoissonBumpField":
        return PoissonBumpField(self.d, self.L, self.intensity, self.c_minus, self.c_plus,
                                self.seed, self.mark_law, self.r, self.skew,
                                self.aniso.copy(), cloud, self.map_center, self.map_width)

    def _F(self, s):
        return self._lo + (self._hi - self._lo) * 0.5 * (1 + np.tanh((s - self.map_center) / self.map_width))

    def _Fp(self, s):
        return (self._hi - self._lo) * 0.5 / (self.map_width * np.cosh((s - self.map_center) / self.map_width) ** 2)

    def baseline(self) -> float:
        """a value far from every cloud point: F(0)."""
        return float(self._F(0.0))

    # -- shot-noise sums on structured axes (splatting) ----------------------

    def _shot_sums(self, axes, want_grad: bool):
        steps = []
        lens = []
        starts = []
        for a in axes:
            flat = np.asarray(a).ravel()
            lens.append(flat.size)
            if flat.size > 1:
                st = flat[1] - flat[0]
                if not np.allclose(np.diff(flat), st, rtol=1e-9, atol=1e-12):
                    raise InvalidParameterError("structured evaluation needs uniform axes")
            else:
                st = self.L
            steps.append(float(st))
            starts.append(float(flat[0]))
        shape = tuple(lens)
        S = np.zeros(shape)
        G = np.zeros((self.d,) + shape) if want_grad else None
        locs, marks = self.cloud.locations, self.cloud.marks
        span = [lens[k] * steps[k] for k in range(self.d)]
        for i in range(locs.shape[0]):
            z = locs[i]
            m = marks[i]
            # periodic images of the bump inside each axis span
            img_idx = []
            img_off = []
            for k in range(self.d):
                n_img = max(1, int(round(span[k] / self.L)))
                lo_list, off_list = [], []
                for j in range(n_img):
                    zk = z[k] + j * self.L
                    lo = math.ceil((zk - self.r - starts[k]) / steps[k])
                    hi = math.floor((zk + self.r - starts[k]) / steps[k])
                    if hi < lo:
                        continue
                    idxs = np.arange(lo, hi + 1)
                    lo_list.append(np.mod(idxs, lens[k]))
                    off_list.append(starts[k] + idxs * steps[k] - zk)
                if not lo_list:
                    img_idx.append(None)
                    break
                img_idx.append(np.concatenate(lo_list))
                img_off.append(np.concatenate(off_list))
            if len(img_idx) < self.d or any(v is None for v in img_idx):
                continue
            r2 = 0.0
            for k in range(self.d):
                shp = [1] * self.d
                shp[k] = img_off[k].size
                r2 = r2 + (img_off[k].reshape(shp)) ** 2
            u = np.sqrt(r2) / self.r
            prof = bump_profile(u)
            if self.skew:
                arg = 0.0
                for k in range(self.d):
                    shp = [1] * self.d
                    shp[k] = img_off[k].size
                    arg = arg + self.skew_wave[k] * img_off[k].reshape(shp)
                skf = 1.0 + 0.5 * np.sin(arg)
            else:
                skf = 1.0
            val = m * prof * skf
            window = np.ix_(*img_idx)
            S[window] += val
            if want_grad:
                with np.errstate(invalid="ignore", divide="ignore"):
                    dprof_du = bump_profile_deriv(u)
                    radial = np.where(u > 0, dprof_du / (np.maximum(u, 1e-300) * self.r * self.r), 0.0)
                for k in range(self.d):
                    shp = [1] * self.d
                    shp[k] = img_off[k].size
                    gk = m * skf * radial * img_off[k].reshape(shp)
                    if self.skew:
                        gk = gk + m * prof * 0.5 * np.cos(arg) * self.skew_wave[k]
                    G[k][window] += gk
        return S, G

    def _diag_axes(self, axes):
        S, _ = self._shot_sums(axes, want_grad=False)
        shape = np.broadcast_shapes(*(np.asarray(a).shape for a in axes))
        base = self._F(S).reshape(shape)
        out = np.empty((self.d,) + shape)
        for k in range(self.d):
            out[k] = base + self.aniso[k]
        return out

    def _drift_axes(self, axes):
        S, G = self._shot_sums(axes, want_grad=True)
        shape = np.broadcast_shapes(*(np.asarray(a).shape for a in axes))
        Fp = self._Fp(S)
        out = np.empty((self.d,) + shape)
        for k in range(self.d):
            out[k] = (0.5 * Fp * G[k]).reshape(shape)
        return out

    # structured-axes shortcut does not suit scattered points; override

    def evaluate_batch(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("evaluation point is not finite")
        pts = np.mod(pts, self.L)
        S, G = self._scatter_sums(pts)
        a = np.empty((pts.shape[0], self.d))
        b = np.empty((pts.shape[0], self.d))
        base = self._F(S)
        Fp = self._Fp(S)
        for k in range(self.d):
            a[:, k] = base + self.aniso[k]
            b[:, k] = 0.5 * Fp * G[:, k]
        return a, b

    def _scatter_sums(self, pts: np.ndarray, chunk: int = 2048):
        marks_p, locs_p, mask_p = self.cloud.padded_cells()
        C = self.cloud.ncells_axis
        cs = self.cloud.cell_size
        reach = int(math.ceil(self.r / cs))
        offsets = list(np.ndindex(*(2 * reach + 1,) * self.d))
        N = pts.shape[0]
        S = np.zeros(N)
        G = np.zeros((N, self.d))
        for lo in range(0, N, chunk):
            hi = min(N, lo + chunk)
            x = pts[lo:hi]
            cells = np.floor(x / cs).astype(np.int64)
            for off in offsets:
                o = np.array(off) - reach
                raw = cells + o
                wrapped = np.mod(raw, C)
                shift = (raw - wrapped) // C * self.L
                sel = tuple(wrapped[:, k] for k in range(self.d))
                zl = locs_p[sel] + shift[:, None, :]
                ml = marks_p[sel]
                mk = mask_p[sel]
                dz = x[:, None, :] - zl
                r2 = np.einsum("npk,npk->np", dz, dz)
                u = np.sqrt(r2) / self.r
                inside = mk & (u < 1.0)
                if not inside.any():
                    continue
                prof = np.where(inside, bump_profile(u), 0.0)
                if self.skew:
                    arg = np.tensordot(dz, self.skew_wave, axes=([2], [0]))
                    skf = 1.0 + 0.5 * np.sin(arg)
                else:
                    skf = 1.0
                val = ml * prof * (skf if self.skew else 1.0)
                S[lo:hi] += val.sum(axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    radial = np.where(inside, bump_profile_deriv(u) / (np.maximum(u, 1e-300) * self.r**2), 0.0)
                gterm = (ml * (skf if self.skew else 1.0) * radial)[:, :, None] * dz
                if self.skew:
                    gterm = gterm + (ml * prof * 0.5 * np.cos(arg))[:, :, None] * self.skew_wave[None, None, :]
                    gterm = np.where(inside[:, :, None], gterm, 0.0)
                G[lo:hi] += gterm.sum(axis=1)
        return S, G

    def to_config(self):
        cfg = super().to_config()
        cfg.update(
            intensity=format(self.intensity, ".17g"),
            mark_law=self.mark_law.descriptor(),
            bump_radius=format(self.r, ".17g"),
            skew=str(self.skew),
            map_center=format(self.map_center, ".17g"),
            map_width=format(self.map_width, ".17g"),
        )
        if np.any(self.aniso):
            cfg["aniso"] = ",".join(format(v, ".17g") for v in self.aniso)
        return cfg


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

_BOOL = {"true": True, "false": False, "1": True, "0": False}


def _to_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return _BOOL[str(v).strip().lower()]


def make_field(model: str, **kw) -> CoefficientField:
    """Construct a field from flat (string-friendly) parameters."""
    d = int(kw.pop("d", 2))
    seed = int(kw.pop("seed", 0))

    def fget(name, default):
        v = kw.pop(name, default)
        return float(v) if v is not None else None

    if model == "constant":
        L = fget("L", 1.0)
        if "matrix" in kw:
            rows = [[float(x) for x in row.split(",")] for row in str(kw.pop("matrix")).split(";")]
            return ConstantField(d, matrix=np.array(rows), L=L, seed=seed)
        return ConstantField(d, value=fget("value", 1.0), L=L, seed=seed)
    if model == "laminate":
        values = kw.pop("values", (1.0, 4.0))
        if isinstance(values, str):
            values = tuple(float(v) for v in values.split(","))
        beta = kw.pop("beta", None)
        return LaminateField(
            d, L=fget("L", 1.0), profile=str(kw.pop("profile", "sin")),
            mid=fget("mid", 2.5), amp=fget("amp", 0.3), freq=int(kw.pop("freq", 1)),
            phase=fget("phase", 0.0), values=values,
            beta=float(beta) if beta is not None else None,
            scalar=_to_bool(kw.pop("scalar", True)), seed=seed,
            c_minus=fget("c_minus", None), c_plus=fget("c_plus", None),
        )
    if model == "periodic-smooth":
        return PeriodicSmoothField(
            d, L=fget("L", 1.0), c_minus=fget("c_minus", 1.0), c_plus=fget("c_plus", 3.0),
            seed=seed, n_modes=int(kw.pop("n_modes", 3)), roughness=fget("roughness", 1.0),
        )
    if model == "mollified-checkerboard":
        values = kw.pop("values", (1.0, 4.0))
        if isinstance(values, str):
            values = tuple(float(v) for v in values.split(","))
        return MollifiedCheckerboardField(d, L=fget("L", 8.0), values=values, seed=seed,
                                          c_minus=fget("c_minus", None), c_plus=fget("c_plus", None),
                                          sharpness=int(kw.pop("sharpness", 4)))
    if model == "poisson-bump":
        aniso = kw.pop("aniso", None)
        if isinstance(aniso, str):
            aniso = np.array([float(v) for v in aniso.split(",")])
        return PoissonBumpField(
            d, L=fget("L", 8.0), intensity=fget("intensity", 1.0),
            c_minus=fget("c_minus", 0.5), c_plus=fget("c_plus", 2.0), seed=seed,
            mark_law=kw.pop("mark_law", DEFAULT_MARK_LAW),
            bump_radius=fget("bump_radius", BUMP_RADIUS),
            skew=_to_bool(kw.pop("skew", False)), aniso=aniso,
            map_center=fget("map_center", None), map_width=fget("map_width", None),
        )
    raise InvalidParameterError(f"unknown field model {model!r}")
