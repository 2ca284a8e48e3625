"""Decorrelation curves, resampling identities, quantitative-CLT distance
checks, and the convolution-power lattice sums.

Statistical checks report both sides with standard errors and a slack in SE
units; nothing is auto-tuned.  All fits are restricted to declared windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import fft as sfft
from scipy import integrate

from .correctors import CorrectorSet, psi_direction
from .errors import InvalidParameterError, TruncationRadiusError
from .fields import PoissonCloud, resample_cell
from .lattice import Grid, GridFunction
from .util import mean_and_se, substream


# ---------------------------------------------------------------------------
# Exponent fits and decay curves
# ---------------------------------------------------------------------------


def exponent_fit(abscissae, values, window, n_boot: int = 200, seed: int = 0,
                 kind: str = "power") -> tuple[float, tuple[float, float]]:
    """Log-log least-squares slope over a declared window with a seeded
    bootstrap confidence interval (kind="exponential" fits log-linear)."""
    x = np.asarray(abscissae, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    lo, hi = window
    mask = (x >= lo) & (x <= hi)
    if mask.sum() < 4:
        raise InvalidParameterError("need at least 4 points inside the fit window")
    if np.any(y[mask] <= 0):
        raise InvalidParameterError("fit window contains nonpositive values")
    xs = np.log(x[mask]) if kind == "power" else x[mask]
    ys = np.log(y[mask])
    slope, _ = np.polyfit(xs, ys, 1)
    rng = substream(seed, 11, 0, 0)
    n = xs.size
    boots = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        if np.unique(xs[idx]).size < 2:
            continue
        b, _ = np.polyfit(xs[idx], ys[idx], 1)
        boots.append(b)
    lo_ci, hi_ci = np.percentile(boots, [2.5, 97.5])
    return float(slope), (float(lo_ci), float(hi_ci))


@dataclass
class DecayCurve:
    """Abscissae/value/SE triples with a windowed power-law fit."""

    abscissae: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    window: tuple
    exponent: float
    exponent_ci: tuple
    reference_exponent: float | None = None
    kind: str = "power"
    meta: dict = dc_field(default_factory=dict)

    @staticmethod
    def build(abscissae, values, ses, window, reference_exponent=None, seed=0,
              kind="power", meta=None) -> "DecayCurve":
        a = np.asarray(abscissae, dtype=np.float64)
        if np.any(np.diff(a) <= 0):
            raise InvalidParameterError("abscissae must be strictly increasing")
        slope, ci = exponent_fit(a, values, window, seed=seed, kind=kind)
        return DecayCurve(a, np.asarray(values, dtype=np.float64),
                          np.asarray(ses, dtype=np.float64), tuple(window),
                          slope, ci, reference_exponent, kind, dict(meta or {}))

    def csv_rows(self):
        for i in range(self.abscissae.size):
            yield [self.abscissae[i], self.values[i], self.ses[i]]

    def summary(self) -> dict:
        return {
            "window": list(self.window),
            "exponent": self.exponent,
            "exponent_ci": list(self.exponent_ci),
            "reference_exponent": self.reference_exponent,
            "kind": self.kind,
            **self.meta,
        }


# ---------------------------------------------------------------------------
# Decorrelation in space
# ---------------------------------------------------------------------------


def _corrector_functional(fld, functional, xi, corrector_set, grid_n_per_unit, tol):
    if corrector_set is None:
        n_field = int(round(grid_n_per_unit * fld.L))
        corrector_set = CorrectorSet.compute(
            fld, Grid(fld.d, n_field, fld.L), tol=tol,
            with_flux=(functional == "psi_xi"), rhs_mode="discrete")
    if callable(functional):
        return functional(corrector_set)
    if functional == "phi_xi":
        return corrector_set.phi_direction(xi)
    if functional == "psi_xi":
        return psi_direction(corrector_set.psi, xi)
    raise InvalidParameterError(f"unknown functional {functional!r}")


def decorrelation_curve(fields, functional, lags, xi=None, corrector_sets=None,
                        grid_n_per_unit: int = 4, window=None, seed: int = 0,
                        tol: float = 1e-10) -> DecayCurve:
    """Spatial covariance of a corrector functional at the given lag radii.

    Per environment the full circular autocovariance comes from one FFT; the
    requested lags are read off along the d axis directions (both signs) and
    averaged.  Ensemble SEs across environments; log-log fit over the window.
    """
    lags = np.asarray(sorted(lags), dtype=np.float64)
    d = fields[0].d
    L = fields[0].L
    if lags[-1] > L / 4 + 1e-12:
        raise InvalidParameterError(f"max lag {lags[-1]} exceeds L/4 = {L / 4}")
    xi = np.array([1.0] + [0.0] * (d - 1)) if xi is None else np.asarray(xi, dtype=np.float64)
    per_env = []
    for ie, fld in enumerate(fields):
        cs = corrector_sets[ie] if corrector_sets is not None else None
        g = _corrector_functional(fld, functional, xi, cs, grid_n_per_unit, tol)
        grid = g.grid
        gh = sfft.fftn(g.values - g.values.mean())
        R = sfft.ifftn(gh * np.conj(gh)).real / grid.npoints
        steps = np.round(lags / grid.h).astype(np.int64)
        if np.any(np.abs(steps * grid.h - lags) > 1e-9):
            raise InvalidParameterError("lags must be multiples of the corrector grid spacing")
        row = []
        for s in steps:
            acc = 0.0
            for ax in range(d):
                idx = [0] * d
                idx[ax] = s % grid.n
                acc += R[tuple(idx)]
                idx[ax] = (-s) % grid.n
                acc += R[tuple(idx)]
            row.append(acc / (2 * d))
        per_env.append(row)
    per_env = np.array(per_env)
    values, ses = np.empty(lags.size), np.empty(lags.size)
    for j in range(lags.size):
        values[j], ses[j] = mean_and_se(per_env[:, j])
    window = window or (lags[0], lags[-1])
    # covariances can cross zero at large lags; fit |values| floor-guarded
    fit_vals = np.maximum(np.abs(values), 1e-300)
    return DecayCurve.build(lags, fit_vals, ses, window, seed=seed,
                            meta={"signed_values": values.tolist()})


def odd_moment_asymmetry(fields, lag: float, axis: int = 0, component: int = 0,
                         grid_n_per_unit: int = 4) -> dict:
    """Third-moment lag statistic T(x) - T(-x) for the coefficient entry
    a_cc; separates reflection-asymmetric laws from symmetric ones."""
    per_env = []
    for fld in fields:
        n = int(round(grid_n_per_unit * fld.L))
        grid = Grid(fld.d, n, fld.L)
        a = fld.diag_mesh(grid)[component]
        steps = int(round(lag / grid.h))
        if abs(steps * grid.h - lag) > 1e-9:
            raise InvalidParameterError("lag must be a multiple of the sampling step")
        ac = a - a.mean()
        plus = float((ac**2 * np.roll(ac, -steps, axis=axis)).mean())
        minus = float((ac**2 * np.roll(ac, steps, axis=axis)).mean())
        per_env.append(plus - minus)
    mean, se = mean_and_se(per_env)
    return {"lag": lag, "mean": mean, "se": se, "separation_sigmas": abs(mean) / se if se else np.inf}


# ---------------------------------------------------------------------------
# Resampling identities
# ---------------------------------------------------------------------------


def resampling_identities(clouds, statistic, cell, seed: int = 0, n_inner: int = 16) -> dict:
    """Monte Carlo check of E{|d_k f|^2} = (1/2) E{|f - f_k|^2}.

    statistic: callable(PoissonCloud) -> float.  The conditional expectation
    is estimated from n_inner independent resamples of the cell; the inner-
    variance bias is removed by the factor n_inner / (n_inner + 1), and both
    the raw and corrected estimators are reported.
    """
    if n_inner < 2:
        raise InvalidParameterError("need at least 2 inner resamples")
    lhs_raw, rhs_vals = [], []
    for ic, cloud in enumerate(clouds):
        f = statistic(cloud)
        inner = []
        for j in range(n_inner + 1):
            pert = resample_cell(cloud, cell, seed=seed + 1_000_003 * ic + j + 1)
            inner.append(statistic(pert))
        f_k = inner[-1]
        cond = float(np.mean(inner[:n_inner]))
        lhs_raw.append((f - cond) ** 2)
        rhs_vals.append(0.5 * (f - f_k) ** 2)
    lhs_mean, lhs_se = mean_and_se(lhs_raw)
    corr = n_inner / (n_inner + 1.0)
    rhs_mean, rhs_se = mean_and_se(rhs_vals)
    gap = corr * lhs_mean - rhs_mean
    gap_se = math.hypot(corr * lhs_se, rhs_se)
    return {
        "lhs_raw": lhs_mean,
        "lhs_corrected": corr * lhs_mean,
        "lhs_se": corr * lhs_se,
        "rhs": rhs_mean,
        "rhs_se": rhs_se,
        "gap": gap,
        "gap_se": gap_se,
        "gap_sigmas": abs(gap) / gap_se if gap_se else 0.0,
        "n_inner": n_inner,
        "n_env": len(clouds),
    }


def covariance_bound_check(clouds, stat_f, stat_g, cells, seed: int = 0) -> dict:
    """|E{f g}| <= sum_k sqrt(E|f - f_k|^2) sqrt(E|g - g_k|^2) for centered
    statistics, Monte Carlo on both sides."""
    fs = np.array([stat_f(c) for c in clouds])
    gs = np.array([stat_g(c) for c in clouds])
    fs = fs - fs.mean()
    gs = gs - gs.mean()
    lhs, lhs_se = mean_and_se(fs * gs)
    rhs = 0.0
    for cell in cells:
        df2, dg2 = [], []
        for ic, cloud in enumerate(clouds):
            pert = resample_cell(cloud, cell, seed=seed + 7_919 * ic + 13)
            df2.append((stat_f(cloud) - stat_f(pert)) ** 2)
            dg2.append((stat_g(cloud) - stat_g(pert)) ** 2)
        rhs += math.sqrt(max(np.mean(df2), 0.0)) * math.sqrt(max(np.mean(dg2), 0.0))
    return {
        "lhs_abs": abs(lhs),
        "lhs_se": lhs_se,
        "rhs": rhs,
        "holds_within_se": abs(lhs) <= rhs + 3 * lhs_se,
    }


# ---------------------------------------------------------------------------
# Quantitative CLT distances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothstepTestFunction:
    """amplitude * S(x / scale) with S the antiderivative of (1-u^2)^3.

    S saturates at +-16/35; derivative bounds are analytic:
    ||f'|| = A/s, ||f''|| = (A/s^2) 96/(25 sqrt 5), ||f'''|| = 6 A/s^3.
    """

    amplitude: float
    scale: float

    def __post_init__(self):
        if self.amplitude <= 0 or self.scale <= 0:
            raise InvalidParameterError("test function needs positive amplitude and scale")

    def __call__(self, x):
        u = np.clip(np.asarray(x, dtype=np.float64) / self.scale, -1.0, 1.0)
        s = u - u**3 + 3 * u**5 / 5 - u**7 / 7
        return self.amplitude * s

    @property
    def d2_bound(self) -> float:
        return self.amplitude / self.scale**2 * 96.0 / (25.0 * math.sqrt(5.0))

    @property
    def d3_bound(self) -> float:
        return 6.0 * self.amplitude / self.scale**3

    def d2(self, x):
        u = np.asarray(x, dtype=np.float64) / self.scale
        inside = np.abs(u) < 1
        v = np.where(inside, 1 - u**2, 0.0)
        return self.amplitude / self.scale**2 * (-6 * u * v**2)

    def gauss_expectation(self, sigma: float, n_quad: int = 256) -> float:
        # Gauss-Legendre against the explicit density on [-10 sigma, 10 sigma];
        # the neglected tail is below 1e-22 of the (bounded) test function
        nodes, weights = np.polynomial.legendre.leggauss(n_quad)
        z = 10.0 * sigma * nodes
        w = 10.0 * sigma * weights
        dens = np.exp(-0.5 * (z / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
        return float(np.sum(w * dens * self(z)))


def default_test_functions(sigma_t: float) -> list[SmoothstepTestFunction]:
    """Five scaled smoothsteps spanning the scale of sigma sqrt(t)."""
    return [SmoothstepTestFunction(1.0, s * sigma_t) for s in (0.5, 0.8, 1.2, 2.0, 3.0)]


def clt_distance(M_t, QV_t, sigma2: float, t: float, test_functions,
                 M_tau=None, third_order_constant: float = 1.0) -> dict:
    """Second- and third-order martingale CLT bounds on sample data.

    Second order: |E f(M_t) - E f(sigma W_t)| <= ||f''|| E|<M>_t - sigma^2 t|.
    Third order (needs M_tau): |E{f(M_t) - f(sigma W_t)
    - (1/2) f''(M_tau) (<M>_t - sigma^2 t)}| <= C ||f'''|| E|<M>_t
    - sigma^2 t|^{3/2} with the reference constant C pinned to
    third_order_constant.  Violations beyond 3 SE are flagged.
    """
    M_t = np.asarray(M_t, dtype=np.float64)
    QV_t = np.asarray(QV_t, dtype=np.float64)
    if sigma2 <= 0 or t <= 0:
        raise InvalidParameterError("sigma2 and t must be positive")
    sigma_t = math.sqrt(sigma2 * t)
    n = M_t.size
    report = {"n_samples": n, "sigma2": sigma2, "t": t, "functions": []}
    dev = QV_t - sigma2 * t
    for tf in test_functions:
        if not hasattr(tf, "d2_bound") or tf.d2_bound <= 0 or tf.d3_bound <= 0:
            raise InvalidParameterError("test functions must declare positive derivative bounds")
        fM = tf(M_t)
        gauss = tf.gauss_expectation(sigma_t)
        lhs2 = fM.mean() - gauss
        lhs2_se = fM.std(ddof=1) / math.sqrt(n)
        rhs2_vals = tf.d2_bound * np.abs(dev)
        rhs2, rhs2_se = float(rhs2_vals.mean()), float(rhs2_vals.std(ddof=1) / math.sqrt(n))
        slack2 = (rhs2 - abs(lhs2)) / math.hypot(lhs2_se, rhs2_se) if (lhs2_se or rhs2_se) else np.inf
        entry = {
            "scale": getattr(tf, "scale", None),
            "second_order": {
                "lhs_abs": abs(float(lhs2)), "lhs_se": lhs2_se,
                "rhs": rhs2, "rhs_se": rhs2_se,
                "slack_sigmas": float(slack2),
                "holds_within_se": abs(lhs2) <= rhs2 + 3 * math.hypot(lhs2_se, rhs2_se),
            },
        }
        if M_tau is not None:
            corr = fM - 0.5 * tf.d2(np.asarray(M_tau)) * dev
            lhs3 = corr.mean() - gauss
            lhs3_se = corr.std(ddof=1) / math.sqrt(n)
            rhs3_vals = third_order_constant * tf.d3_bound * np.abs(dev) ** 1.5
            rhs3, rhs3_se = float(rhs3_vals.mean()), float(rhs3_vals.std(ddof=1) / math.sqrt(n))
            slack3 = (rhs3 - abs(lhs3)) / math.hypot(lhs3_se, rhs3_se) if (lhs3_se or rhs3_se) else np.inf
            entry["third_order"] = {
                "lhs_abs": abs(float(lhs3)), "lhs_se": lhs3_se,
                "rhs": rhs3, "rhs_se": rhs3_se,
                "slack_sigmas": float(slack3),
                "holds_within_se": abs(lhs3) <= rhs3 + 3 * math.hypot(lhs3_se, rhs3_se),
                "constant": third_order_constant,
            }
        report["functions"].append(entry)
    report["all_hold"] = all(
        e["second_order"]["holds_within_se"]
        and e.get("third_order", {}).get("holds_within_se", True)
        for e in report["functions"]
    )
    return report


def stopped_martingale_samples(bundle, sigma2: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(M_t, QV_t, M_tau) from a decomposed bundle, with
    tau = sup{s <= t : <M>_s <= sigma^2 t} read off the stored paths."""
    if bundle.M is None:
        raise InvalidParameterError("bundle is not decomposed")
    t = bundle.eps**2 * bundle.times[-1]
    target = sigma2 * t
    QV = bundle.QV
    M = bundle.M
    n = M.shape[1]
    M_tau = np.empty(n)
    for j in range(n):
        idx = np.searchsorted(QV[:, j], target, side="right") - 1
        M_tau[j] = M[max(idx, 0), j]
    return M[-1].copy(), QV[-1].copy(), M_tau


# ---------------------------------------------------------------------------
# Convolution power sums (lattice)
# ---------------------------------------------------------------------------


def _square_multiplicities(dim: int, Q: int) -> np.ndarray:
    """r_dim(q) = #{k in Z^dim : |k|^2 = q} for q = 0..Q, by iterated
    convolution over one squared coordinate at a time."""
    r = np.zeros(Q + 1, dtype=np.float64)
    r[0] = 1.0
    for _ in range(dim):
        nxt = np.zeros_like(r)
        m = 0
        while m * m <= Q:
            mult = 1.0 if m == 0 else 2.0
            nxt[m * m :] += mult * r[: Q + 1 - m * m]
            m += 1
        r = nxt
    return r


def _power_term(t2: np.ndarray, p: int) -> np.ndarray:
    """(1 and |k|^-p) as a function of |k|^2."""
    out = np.ones_like(t2)
    mask = t2 > 1.0
    out[mask] = t2[mask] ** (-p / 2.0)
    return out


def _ball_sum(x: float, d: int, p: int, R: float, rmult: np.ndarray) -> float:
    Q = int(R * R)
    K = int(math.floor(R))
    total = 0.0
    qs = np.arange(Q + 1, dtype=np.float64)
    for k1 in range(-K, K + 1):
        qmax = Q - k1 * k1
        if qmax < 0:
            continue
        q = qs[: qmax + 1]
        w = rmult[: qmax + 1]
        t2 = k1 * k1 + q
        s2 = (k1 - x) ** 2 + q
        total += float(np.sum(w * _power_term(t2, p) * _power_term(s2, p)))
    return total


def _tail_integral(x: float, d: int, p: int, R: float, n_inner: int = 64) -> float:
    """int_{|y|>R} |y|^-p |x e1 - y|^-p dy by bipolar quadrature (R > x+1)."""
    rho = max(x, 1e-9)
    sigma = 2 * math.pi ** ((d - 1) / 2.0) / math.gamma((d - 1) / 2.0)
    nodes, weights = np.polynomial.legendre.leggauss(n_inner)
    expo = (d - 3) / 2.0

    def inner(r):
        a, b = r - rho, r + rho
        s = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        w = 0.5 * (b - a) * weights
        core = (s * s - a * a) * (b * b - s * s)
        vals = s ** (1 - p) * np.where(core > 0, core, 0.0) ** expo
        return float(np.sum(w * vals))

    def outer(r):
        return r ** (d - 2 - p) * inner(r) / (2 * r * rho) ** (d - 3)

    # map [R, inf) to (0, 1] via r = R/u; the transformed integrand is smooth
    val, _ = integrate.quad(lambda u: outer(R / u) * R / (u * u), 0.0, 1.0, limit=200)
    return sigma / rho * val


def convolution_power_sum(xs, d: int, p: int, radius: float | None = None,
                          tail_rel_budget: float = 0.01) -> dict:
    """S(x) = sum_k (1 and |k|^-p)(1 and |x e1 - k|^-p) with the appendix
    reference bound and the sum/bound ratio.

    The lattice ball |k| <= R is summed exactly through squared-radius
    multiplicities; the remainder is the bipolar tail integral.  The
    truncation error is estimated by comparing against radius 1.5 R and must
    stay below tail_rel_budget, else TruncationRadiusError.
    """
    if d < 3:
        raise InvalidParameterError("convolution sums need d >= 3")
    if p not in (d - 1, d):
        raise InvalidParameterError("exponent must be d-1 or d")
    xs = np.asarray(sorted(xs), dtype=np.float64)
    R = float(radius or max(64.0, 2.5 * xs[-1] + 20.0))
    if R <= xs[-1] + 2.0:
        raise TruncationRadiusError(
            f"radius {R} does not clear the largest probe {xs[-1]}; enlarge radius"
        )
    R2 = 1.5 * R
    rmult = _square_multiplicities(d - 1, int(R2 * R2) + 1)
    values, ratios, errs = [], [], []
    for x in xs:
        s1 = _ball_sum(x, d, p, R, rmult) + _tail_integral(x, d, p, R)
        s2 = _ball_sum(x, d, p, R2, rmult) + _tail_integral(x, d, p, R2)
        err = abs(s1 - s2)
        if err > tail_rel_budget * abs(s2):
            raise TruncationRadiusError(
                f"truncation error {err:.3e} above {tail_rel_budget:.0%} of {s2:.3e}; enlarge radius"
            )
        if p == d - 1:
            bound = min(1.0, x ** (2 - d)) if x > 0 else 1.0
        else:
            bound = min(1.0, math.log(2 + x) / x**d) if x > 0 else 1.0
        values.append(s2)
        ratios.append(s2 / bound)
        errs.append(err)
    return {
        "x": xs,
        "values": np.array(values),
        "ratios": np.array(ratios),
        "bound_kind": "|x|^(2-d)" if p == d - 1 else "log(2+|x|)/|x|^d",
        "truncation_errors": np.array(errs),
        "radius": R2,
        "ratio_band": float(max(ratios) / min(ratios)) if min(ratios) > 0 else np.inf,
    }
