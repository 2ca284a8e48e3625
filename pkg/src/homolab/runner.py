"""Experiment orchestration: flat INI configs, validation, deterministic
parallel ensembles, and CSV/JSON/figure artifacts with a manifest.

Re-running the same config reproduces the CSV bodies byte-exactly,
independently of the worker count: every random stream is derived from the
configured seed and ensemble reductions run in fixed index order.
"""

from __future__ import annotations

import configparser
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import __version__
from .correctors import CorrectorSet, voigt_reuss_bounds
from .diagnostics import (
    DecayCurve,
    clt_distance,
    convolution_power_sum,
    decorrelation_curve,
    default_test_functions,
    stopped_martingale_samples,
)
from .errors import (
    ConfigParseError,
    DiscretizationInconsistencyError,
    InvalidParameterError,
    SimulationBlowupError,
    SolverFailureError,
    TruncationRadiusError,
)
from .fields import make_field
from .forward import (
    CosineDatum,
    GaussianDatum,
    expansion_report,
    laplace_in_time_elliptic,
    solve_elliptic_direct,
)
from .lattice import Grid, assemble
from .util import config_hash, mean_and_se, pairwise_mean, write_csv, write_json
from .walk import decompose, env_decay, simulate_path

KINDS = ("homogenize", "expand", "elliptic", "decay", "decorr", "clt", "conv-lemma", "periodic-suite")

NUMERICAL_ERRORS = (
    SolverFailureError,
    SimulationBlowupError,
    TruncationRadiusError,
    DiscretizationInconsistencyError,
)


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    sections: dict
    raw_text: str
    out_dir: str = "."
    workers: int = 1
    seed_offset: int = 0

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse flat INI text; raises ConfigParseError with line information."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigParseError(f"config parse error (line {line}): {exc}") from exc
    sections = {s: dict(cp.items(s)) for s in cp.sections()}
    exp = sections.get("experiment", {})
    cfg_kind = exp.get("kind", kind)
    seed = exp.get("seed")
    return ExperimentConfig(
        kind=cfg_kind if cfg_kind is not None else "",
        seed=int(seed) if seed is not None and _is_int(seed) else -1,
        sections=sections,
        raw_text=text,
        out_dir=exp.get("out", "."),
    )


def _is_int(s) -> bool:
    try:
        int(str(s))
        return True
    except ValueError:
        return False


def _is_float(s) -> bool:
    try:
        float(str(s))
        return True
    except ValueError:
        return False


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).replace(",", " ").split()]


def _points(text: str) -> list[tuple]:
    pts = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if chunk:
            pts.append(tuple(float(t) for t in chunk.replace(",", " ").split()))
    return pts


def validate(cfg: ExperimentConfig) -> list[str]:
    """All problems at once, each naming the offending key(s)."""
    problems = []
    exp = cfg.section("experiment")
    if cfg.kind not in KINDS:
        problems.append(
            f"experiment.kind: unknown kind {cfg.kind!r}; allowed: {', '.join(KINDS)}"
        )
    if "seed" not in exp:
        problems.append("experiment.seed: missing (seeds must be explicit)")
    elif not _is_int(exp["seed"]):
        problems.append(f"experiment.seed: not an integer: {exp['seed']!r}")
    fsec = cfg.section("field")
    field = None
    if cfg.kind != "conv-lemma":
        if not fsec:
            problems.append("field: section missing")
        else:
            try:
                field = make_field(**dict(fsec))
            except (InvalidParameterError, KeyError, ValueError) as exc:
                problems.append(f"field: {exc}")
    if cfg.kind in ("expand", "elliptic"):
        lad = cfg.section("ladder")
        if "eps" not in lad:
            problems.append("ladder.eps: missing")
        else:
            try:
                eps_list = _floats(lad["eps"])
            except ValueError:
                problems.append(f"ladder.eps: unparseable {lad['eps']!r}")
                eps_list = []
            m = cfg.get("grid", "m", "8")
            P = cfg.get("grid", "domain")
            if P is None:
                problems.append("grid.domain: missing")
            if not _is_int(m):
                problems.append(f"grid.m: not an integer: {m!r}")
            for eps in eps_list:
                if not (0 < eps <= 1):
                    problems.append(f"ladder.eps: value {eps} outside (0, 1]")
                    continue
                if _is_int(m) and P is not None and _is_float(P):
                    n_phys = int(m) * float(P) / eps
                    if abs(n_phys - round(n_phys)) > 1e-9:
                        problems.append(
                            f"ladder.eps = {eps} incommensurate with grid.m = {m}, grid.domain = {P}"
                        )
                    if field is not None:
                        periods = float(P) / (eps * field.L)
                        if abs(periods - round(periods)) > 1e-9 or round(periods) < 1:
                            problems.append(
                                f"ladder.eps = {eps}: grid.domain = {P} not an integer number of scaled field periods"
                            )
        if not cfg.section("probes"):
            problems.append("probes: section missing")
        elif cfg.kind == "expand" and "t" not in cfg.section("probes"):
            problems.append("probes.t: missing")
        if "x" not in cfg.section("probes") and cfg.section("probes"):
            problems.append("probes.x: missing")
        if not cfg.section("datum"):
            problems.append("datum: section missing")
    if cfg.kind in ("decay", "decorr", "clt", "homogenize", "expand", "elliptic"):
        ens = cfg.section("ensemble")
        n_env = ens.get("n_env", "1")
        if not _is_int(n_env) or int(n_env) < 1:
            problems.append(f"ensemble.n_env: bad value {n_env!r}")
    if cfg.kind == "decay":
        if "times" not in cfg.section("ensemble"):
            problems.append("ensemble.times: missing")
    if cfg.kind == "decorr":
        if "lags" not in cfg.section("ensemble"):
            problems.append("ensemble.lags: missing")
        elif field is not None:
            lags = _floats(cfg.section("ensemble")["lags"])
            if max(lags) > field.L / 4:
                problems.append(
                    f"ensemble.lags: max lag {max(lags)} exceeds field.L/4 = {field.L / 4}"
                )
    if cfg.kind == "conv-lemma":
        cases = cfg.get("lemma", "cases")
        if cases is None:
            problems.append("lemma.cases: missing (semicolon list of 'd p')")
        else:
            for chunk in _points(cases):
                if len(chunk) != 2:
                    problems.append(f"lemma.cases: bad entry {chunk}")
                else:
                    d, p = int(chunk[0]), int(chunk[1])
                    if d < 3 or p not in (d - 1, d):
                        problems.append(f"lemma.cases: need d >= 3 and p in {{d-1, d}}, got {d} {p}")
    return problems


# ---------------------------------------------------------------------------
# Datum and ensemble builders
# ---------------------------------------------------------------------------


def build_datum(cfg: ExperimentConfig, d: int):
    sec = cfg.section("datum")
    kind = sec.get("kind", "gaussian")
    period = float(cfg.get("grid", "domain", sec.get("period", "1")))
    if kind == "gaussian":
        center = _floats(sec["center"]) if "center" in sec else None
        return GaussianDatum(d, period, amplitude=float(sec.get("amplitude", 1.0)),
                             center=center, variance=float(sec.get("variance", 0.1)))
    if kind == "cosine":
        modes = []
        for line in sec.get("modes", "1.0, 1" + " 0" * (d - 1) + ", 0.0").strip().splitlines():
            amp_s, q_s, ph_s = [t.strip() for t in line.split(",")]
            modes.append((float(amp_s), tuple(int(v) for v in q_s.split()), float(ph_s)))
        return CosineDatum(d, period, modes)
    raise InvalidParameterError(f"unknown datum kind {kind!r}")


def build_ensemble(cfg: ExperimentConfig, n_env: int):
    fields = []
    base = dict(cfg.section("field"))
    for i in range(n_env):
        fc = dict(base)
        fc["seed"] = str(cfg.seed + cfg.seed_offset + i)
        fields.append(make_field(**fc))
    return fields


def parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    # one FFT thread per process while the pool is active
    os.environ["HOMOLAB_FFT_WORKERS"] = "1"
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    finally:
        os.environ.pop("HOMOLAB_FFT_WORKERS", None)


# module-level workers (picklable)


def _corrector_job(args):
    field_cfg, grid_args, lam, with_flux, rhs_mode, tol = args
    fld = make_field(**field_cfg)
    return CorrectorSet.compute(fld, Grid(*grid_args), lam=lam, tol=tol,
                                with_flux=with_flux, rhs_mode=rhs_mode)


def compute_corrector_sets(fields, grid: Grid, lam=0.0, with_flux=False,
                           rhs_mode="discrete", tol=1e-11, workers=1):
    jobs = [(f.to_config(), (grid.d, grid.n, grid.L), lam, with_flux, rhs_mode, tol) for f in fields]
    return parallel_map(_corrector_job, jobs, workers)


def _expansion_job(args):
    (field_cfgs, grid_args, eps_ladder, probes, datum_cfg, mode, m, dt, A_ref, offset, tol) = args
    fields = [make_field(**fc) for fc in field_cfgs]
    csets = [
        CorrectorSet.compute(f, Grid(*grid_args), rhs_mode="discrete", tol=max(tol, 1e-12))
        for f in fields
    ]
    cfg = ExperimentConfig("", 0, datum_cfg, "")
    datum = build_datum(cfg, fields[0].d)
    rep = expansion_report(fields, csets, eps_ladder, probes, datum, mode=mode, m=m,
                           dt=dt, A_bar_ref=np.array(A_ref), tol=tol, env_offset=offset)
    return rep.rows


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------


def _run_homogenize(cfg: ExperimentConfig, out: str) -> list[str]:
    n_env = int(cfg.get("ensemble", "n_env", 1))
    n = int(cfg.get("grid", "n", 64))
    lam = float(cfg.get("grid", "lam", 0.0))
    with_flux = str(cfg.get("grid", "with_flux", "true")).lower() in ("1", "true", "yes")
    rhs_mode = cfg.get("grid", "rhs_mode", "auto")
    fields = build_ensemble(cfg, n_env)
    grid = Grid(fields[0].d, n, fields[0].L)
    sets = compute_corrector_sets(fields, grid, lam=lam, with_flux=with_flux,
                                  rhs_mode=rhs_mode, workers=cfg.workers)
    d = grid.d
    header = ["env"] + [f"A_{i}{j}" for i in range(d) for j in range(d)]
    if with_flux:
        header += [f"c_{i}{j}{k}" for i in range(d) for j in range(d) for k in range(d)]
    rows = []
    for ie, cs in enumerate(sets):
        row = [ie] + [cs.A_bar[i, j] for i in range(d) for j in range(d)]
        if with_flux:
            row += [cs.c[i, j, k] for i in range(d) for j in range(d) for k in range(d)]
        rows.append(row)
    write_csv(os.path.join(out, "homogenize.csv"), header, rows)
    mean_A = np.array([[pairwise_mean([cs.A_bar[i, j] for cs in sets]) for j in range(d)]
                       for i in range(d)])
    op = assemble(fields[0], grid, 0.0)
    H, Aar = voigt_reuss_bounds(op)
    summary = {
        "n_env": n_env,
        "lambda": lam,
        "A_bar_mean": mean_A.tolist(),
        "voigt_reuss_first_env": {"harmonic": H.tolist(), "arithmetic": Aar.tolist()},
        "max_abs_c": float(max(np.abs(cs.c).max() for cs in sets)) if with_flux else None,
        "residuals_first_env": sets[0].residuals,
    }
    write_json(os.path.join(out, "summary.json"), summary)
    from . import plots
    figs = plots.plot_homogenize(sets, os.path.join(out, "homogenize.png"))
    return ["homogenize.csv", "summary.json"] + figs


def _run_expand(cfg: ExperimentConfig, out: str, mode: str) -> list[str]:
    n_env = int(cfg.get("ensemble", "n_env", 1))
    m = int(cfg.get("grid", "m", 8))
    P = float(cfg.get("grid", "domain"))
    eps_ladder = _floats(cfg.get("ladder", "eps"))
    dt = cfg.get("ladder", "dt")
    dt = float(dt) if dt is not None else None
    tol = float(cfg.get("grid", "tol", 1e-10))
    xs = _points(cfg.get("probes", "x"))
    if mode == "parabolic":
        ts = _floats(cfg.get("probes", "t"))
        probes = [(t, x) for t in ts for x in xs]
    else:
        probes = xs
    fields = build_ensemble(cfg, n_env)
    d = fields[0].d
    n_field = int(round(m * fields[0].L))
    fgrid = Grid(d, n_field, fields[0].L)
    sets = compute_corrector_sets(fields, fgrid, rhs_mode="discrete",
                                  tol=max(tol, 1e-12), workers=cfg.workers)
    stack = np.stack([cs.A_bar for cs in sets])
    A_ref = np.array([[pairwise_mean(stack[:, i, j]) for j in range(d)] for i in range(d)])
    datum_cfg = {"datum": cfg.section("datum"), "grid": cfg.section("grid")}
    # split environments over workers; fixed merge order keeps bytes stable
    chunks = np.array_split(np.arange(n_env), max(1, min(cfg.workers, n_env)))
    jobs = []
    for chunk in chunks:
        if len(chunk) == 0:
            continue
        field_cfgs = [fields[i].to_config() for i in chunk]
        jobs.append((field_cfgs, (d, n_field, fields[0].L), eps_ladder, probes,
                     datum_cfg, mode, m, dt, A_ref.tolist(), int(chunk[0]), tol))
    row_blocks = parallel_map(_expansion_job, jobs, cfg.workers)
    from .forward import ExpansionReport
    rep = ExpansionReport(mode, list(eps_ladder), list(probes), A_ref)
    for block in row_blocks:
        rep.rows.extend(block)
    name = "expand" if mode == "parabolic" else "elliptic"
    write_csv(os.path.join(out, f"{name}.csv"), rep.csv_header(), rep.csv_rows())
    summary = rep.summary()
    artifacts = [f"{name}.csv", "summary.json"]
    if mode == "elliptic" and str(cfg.get("ladder", "laplace_check", "false")).lower() in ("1", "true", "yes"):
        eps0 = eps_ladder[0]
        grid = Grid(d, int(round(m * P / eps0)), P)
        datum = build_datum(cfg, d)
        direct = solve_elliptic_direct(fields[0], eps0, datum, grid, tol=1e-11)
        lap = laplace_in_time_elliptic(fields[0], eps0, datum, grid, tol=1e-10)
        summary["laplace_agreement_max_abs"] = float(np.abs(direct.values - lap.values).max())
    write_json(os.path.join(out, "summary.json"), summary)
    from . import plots
    figs = plots.plot_expansion(rep, os.path.join(out, f"{name}.png"))
    return artifacts + figs


def _decay_job(args):
    field_cfg, functional, times, n_paths, seed, grid_n_per_unit, dt, surrogate = args
    fld = make_field(**field_cfg)
    return env_decay([fld], functional, times, n_paths, seed,
                     grid_n_per_unit=grid_n_per_unit, dt=dt, surrogate=surrogate)["per_env"][0]


def _run_decay(cfg: ExperimentConfig, out: str) -> list[str]:
    ens = cfg.section("ensemble")
    n_env = int(ens.get("n_env", 8))
    n_paths = int(ens.get("n_paths", 32))
    times = _floats(ens["times"])
    dt = float(ens.get("dt", 0.02))
    gppu = int(ens.get("grid_n_per_unit", 4))
    functional = ens.get("functional", "phi_xi")
    surrogate = str(ens.get("surrogate", "false")).lower() in ("1", "true", "yes")
    window = _floats(ens.get("window", f"{times[0]} {times[-1]}"))
    reference = ens.get("reference_exponent")
    fields = build_ensemble(cfg, n_env)
    jobs = [(f.to_config(), functional, times, n_paths, cfg.seed + 31 * i, gppu, dt, surrogate)
            for i, f in enumerate(fields)]
    per_env = np.array(parallel_map(_decay_job, jobs, cfg.workers))
    values, ses = [], []
    for j in range(len(times)):
        mval, se = mean_and_se(per_env[:, j])
        values.append(mval)
        ses.append(se)
    curve = DecayCurve.build(times, np.maximum(values, 1e-300), ses, tuple(window),
                             reference_exponent=float(reference) if reference else None,
                             seed=cfg.seed, meta={"signed_values": list(map(float, values))})
    write_csv(os.path.join(out, "decay.csv"), ["t", "value", "se"], curve.csv_rows())
    write_json(os.path.join(out, "summary.json"), curve.summary())
    from . import plots
    figs = plots.plot_curve(curve, os.path.join(out, "decay.png"),
                            xlabel="t", ylabel="E |E_B g(omega_t)|^2")
    return ["decay.csv", "summary.json"] + figs


def _run_decorr(cfg: ExperimentConfig, out: str) -> list[str]:
    ens = cfg.section("ensemble")
    n_env = int(ens.get("n_env", 8))
    lags = _floats(ens["lags"])
    gppu = int(ens.get("grid_n_per_unit", 4))
    functional = ens.get("functional", "phi_xi")
    window = _floats(ens.get("window", f"{lags[0]} {lags[-1]}"))
    reference = ens.get("reference_exponent")
    fields = build_ensemble(cfg, n_env)
    fgrid = Grid(fields[0].d, int(round(gppu * fields[0].L)), fields[0].L)
    sets = compute_corrector_sets(fields, fgrid, rhs_mode="discrete",
                                  with_flux=(functional == "psi_xi"), workers=cfg.workers)
    curve = decorrelation_curve(fields, functional, lags, corrector_sets=sets,
                                window=tuple(window), seed=cfg.seed)
    if reference:
        curve.reference_exponent = float(reference)
    write_csv(os.path.join(out, "decorr.csv"), ["lag", "value", "se"], curve.csv_rows())
    write_json(os.path.join(out, "summary.json"), curve.summary())
    from . import plots
    figs = plots.plot_curve(curve, os.path.join(out, "decorr.png"),
                            xlabel="|x|", ylabel="covariance")
    return ["decorr.csv", "summary.json"] + figs


def _clt_job(args):
    field_cfg, grid_args, xi, eps, horizon, dt, n_paths, seed = args
    fld = make_field(**field_cfg)
    cs = CorrectorSet.compute(fld, Grid(*grid_args), rhs_mode="discrete", tol=1e-12)
    b = simulate_path(fld, np.zeros(fld.d), dt, horizon, seed, n_paths=n_paths)
    decompose(b, cs, np.asarray(xi), eps)
    sigma2 = float(np.asarray(xi) @ cs.A_bar @ np.asarray(xi))
    M_t, QV_t, M_tau = stopped_martingale_samples(b, sigma2)
    return M_t, QV_t, M_tau, sigma2


def _run_clt(cfg: ExperimentConfig, out: str) -> list[str]:
    ens = cfg.section("ensemble")
    n_env = int(ens.get("n_env", 8))
    n_paths = int(ens.get("n_paths", 256))
    eps = float(ens.get("eps", 0.5))
    t = float(ens.get("t", 1.0))
    dt = float(ens.get("dt", 0.01))
    gppu = int(ens.get("grid_n_per_unit", 8))
    fields = build_ensemble(cfg, n_env)
    d = fields[0].d
    xi = _floats(ens.get("xi", "1" + " 0" * (d - 1)))
    n_field = int(round(gppu * fields[0].L))
    jobs = [(f.to_config(), (d, n_field, f.L), xi, eps, t / eps**2, dt, n_paths,
             cfg.seed + 101 * i) for i, f in enumerate(fields)]
    results = parallel_map(_clt_job, jobs, cfg.workers)
    M = np.concatenate([r[0] for r in results])
    QV = np.concatenate([r[1] for r in results])
    M_tau = np.concatenate([r[2] for r in results])
    sigma2 = pairwise_mean([r[3] for r in results])
    tfs = default_test_functions(float(np.sqrt(sigma2 * t)))
    report = clt_distance(M, QV, sigma2, t, tfs, M_tau=M_tau)
    rows = []
    for e in report["functions"]:
        rows.append([e["scale"], e["second_order"]["lhs_abs"], e["second_order"]["rhs"],
                     e["second_order"]["slack_sigmas"], e["third_order"]["lhs_abs"],
                     e["third_order"]["rhs"], e["third_order"]["slack_sigmas"]])
    write_csv(os.path.join(out, "clt.csv"),
              ["scale", "lhs2", "rhs2", "slack2_sigmas", "lhs3", "rhs3", "slack3_sigmas"], rows)
    write_json(os.path.join(out, "summary.json"), report)
    from . import plots
    figs = plots.plot_clt(report, os.path.join(out, "clt.png"))
    return ["clt.csv", "summary.json"] + figs


def _run_conv_lemma(cfg: ExperimentConfig, out: str) -> list[str]:
    sec = cfg.section("lemma")
    cases = [(int(a), int(b)) for a, b in _points(sec["cases"])]
    xs = _floats(sec.get("x", "10 15 20 30 40 50"))
    radius = sec.get("radius")
    rows = []
    summary = {"cases": []}
    results = {}
    for d, p in cases:
        res = convolution_power_sum(xs, d, p, radius=float(radius) if radius else None)
        results[(d, p)] = res
        for i, x in enumerate(res["x"]):
            rows.append([d, p, x, res["values"][i], res["ratios"][i], res["truncation_errors"][i]])
        summary["cases"].append({
            "d": d, "p": p, "bound": res["bound_kind"],
            "ratio_band": res["ratio_band"], "radius": res["radius"],
        })
    write_csv(os.path.join(out, "conv_lemma.csv"),
              ["d", "p", "x", "sum", "ratio_to_bound", "truncation_error"], rows)
    write_json(os.path.join(out, "summary.json"), summary)
    from . import plots
    figs = plots.plot_conv_lemma(results, os.path.join(out, "conv_lemma.png"))
    return ["conv_lemma.csv", "summary.json"] + figs


def _run_periodic_suite(cfg: ExperimentConfig, out: str) -> list[str]:
    """Fredholm correctors, the c_ijk refinement/lambda ladder, and the
    exponential mixing rate of the periodic environment process."""
    sec = cfg.section("ensemble")
    grids = [int(v) for v in _floats(cfg.get("grid", "ns", "32 64"))]
    lams = _floats(sec.get("lams", "0.01 0.0001 0"))
    fld = build_ensemble(cfg, 1)[0]
    rows = []
    summary = {"c_refinement": [], "lambda_ladder": []}
    for n in grids:
        grid = Grid(fld.d, n, fld.L)
        cs = CorrectorSet.compute(fld, grid, tol=1e-12, with_flux=True, rhs_mode="analytic")
        maxc = float(np.abs(cs.c).max())
        scale = float(np.linalg.norm(cs.A_bar, 2))
        rows.append([n, 0.0, maxc, maxc / scale])
        summary["c_refinement"].append({"n": n, "max_abs_c": maxc, "relative": maxc / scale})
    grid = Grid(fld.d, grids[-1], fld.L)
    for lam in lams:
        cs = CorrectorSet.compute(fld, grid, lam=lam, tol=1e-12, with_flux=True,
                                  rhs_mode="analytic")
        maxc = float(np.abs(cs.c).max())
        ibp = float(np.abs(cs.c_ibp_bound).max())
        rows.append([grids[-1], lam, maxc, ibp])
        summary["lambda_ladder"].append({"lambda": lam, "max_abs_c": maxc, "max_ibp_bound": ibp})
    write_csv(os.path.join(out, "periodic_suite.csv"),
              ["n", "lambda", "max_abs_c", "scale_or_bound"], rows)
    # exponential mixing of E_B g(X_t) for a mean-zero observable
    times = _floats(sec.get("times", "0.5 1 1.5 2 2.5 3"))
    n_paths = int(sec.get("n_paths", 4096))
    dec = env_decay([fld], "phi_xi", times, n_paths, cfg.seed, grid_n_per_unit=8, dt=0.01)
    vals = np.maximum(np.abs(dec["values"]), 1e-300)
    curve = DecayCurve.build(times, vals, dec["ses"], (times[0], times[-1]),
                             seed=cfg.seed, kind="exponential")
    summary["mixing"] = {"rate": curve.exponent, "ci": list(curve.exponent_ci),
                         "exponential": curve.exponent < 0}
    write_json(os.path.join(out, "summary.json"), summary)
    from . import plots
    figs = plots.plot_periodic_suite(summary, curve, os.path.join(out, "periodic_suite.png"))
    return ["periodic_suite.csv", "summary.json"] + figs


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run(cfg: ExperimentConfig, out_dir: str | None = None, workers: int | None = None,
        seed_offset: int = 0) -> dict:
    """Execute a validated config; returns the manifest dict.

    Raises InvalidParameterError on validation problems (exit code 2 at the
    CLI) and lets numerical failures propagate (exit code 3).
    """
    problems = validate(cfg)
    if problems:
        raise InvalidParameterError("; ".join(problems))
    cfg.out_dir = out_dir or cfg.out_dir
    cfg.workers = workers if workers is not None else cfg.workers
    cfg.seed_offset = seed_offset
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    if cfg.kind == "homogenize":
        artifacts = _run_homogenize(cfg, out)
    elif cfg.kind == "expand":
        artifacts = _run_expand(cfg, out, "parabolic")
    elif cfg.kind == "elliptic":
        artifacts = _run_expand(cfg, out, "elliptic")
    elif cfg.kind == "decay":
        artifacts = _run_decay(cfg, out)
    elif cfg.kind == "decorr":
        artifacts = _run_decorr(cfg, out)
    elif cfg.kind == "clt":
        artifacts = _run_clt(cfg, out)
    elif cfg.kind == "conv-lemma":
        artifacts = _run_conv_lemma(cfg, out)
    else:
        artifacts = _run_periodic_suite(cfg, out)
    manifest = {
        "kind": cfg.kind,
        "config_hash": config_hash(cfg.raw_text),
        "code_version": __version__,
        "seed": cfg.seed,
        "seed_offset": cfg.seed_offset,
        "wall_seconds": time.time() - t0,
        "artifacts": sorted(set(artifacts)),
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    return manifest
