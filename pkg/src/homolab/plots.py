"""Figure rendering for experiment reports: every report path writes a PNG
next to its delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (6.4, 4.2),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def _save(fig, path: str) -> list[str]:
    fig.savefig(path)
    plt.close(fig)
    return [path.rsplit("/", 1)[-1]]


def plot_homogenize(corrector_sets, path: str) -> list[str]:
    d = corrector_sets[0].grid.d
    fig, ax = plt.subplots()
    for i in range(d):
        vals = [cs.A_bar[i, i] for cs in corrector_sets]
        ax.plot(range(len(vals)), vals, "o-", ms=3, label=f"A[{i},{i}]")
    ax.set_xlabel("environment")
    ax.set_ylabel("effective coefficient")
    ax.legend()
    ax.set_title("per-environment effective matrix (diagonal)")
    return _save(fig, path)


def plot_expansion(report, path: str) -> list[str]:
    fig, ax = plt.subplots()
    summary = report.summary()
    for ip, entry in enumerate(summary["probes"]):
        eps = [e["eps"] for e in entry["ladder"]]
        vals = [max(e["mean_abs_C"], 1e-300) for e in entry["ladder"]]
        ses = [e["se_abs_C"] for e in entry["ladder"]]
        finite_se = [s if np.isfinite(s) else 0.0 for s in ses]
        ax.errorbar(eps, vals, yerr=finite_se, marker="o", ms=4, capsize=3,
                    label=f"probe {ip}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("eps")
    ax.set_ylabel("mean |C_eps|")
    ax.legend(fontsize=7)
    ax.set_title(f"expansion remainder ({report.mode})")
    return _save(fig, path)


def plot_curve(curve, path: str, xlabel: str = "t", ylabel: str = "value") -> list[str]:
    fig, ax = plt.subplots()
    ax.errorbar(curve.abscissae, curve.values, yerr=curve.ses, marker="o", ms=4,
                capsize=3, label="measured")
    lo, hi = curve.window
    xs = np.linspace(lo, hi, 50)
    mask = (curve.abscissae >= lo) & (curve.abscissae <= hi)
    anchor_x = curve.abscissae[mask][0]
    anchor_y = curve.values[mask][0]
    if curve.kind == "power":
        ax.plot(xs, anchor_y * (xs / anchor_x) ** curve.exponent, "--",
                label=f"fit slope {curve.exponent:.2f}")
        if curve.reference_exponent is not None:
            ax.plot(xs, anchor_y * (xs / anchor_x) ** curve.reference_exponent, ":",
                    label=f"reference {curve.reference_exponent:.2f}")
        ax.set_xscale("log")
    else:
        ax.plot(xs, anchor_y * np.exp(curve.exponent * (xs - anchor_x)), "--",
                label=f"fit rate {curve.exponent:.2f}")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_clt(report, path: str) -> list[str]:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    scales = [e["scale"] for e in report["functions"]]
    for ax, order, title in ((axes[0], "second_order", "second order"),
                             (axes[1], "third_order", "third order")):
        if order not in report["functions"][0]:
            continue
        lhs = [e[order]["lhs_abs"] for e in report["functions"]]
        rhs = [e[order]["rhs"] for e in report["functions"]]
        w = 0.35
        idx = np.arange(len(scales))
        ax.bar(idx - w / 2, lhs, w, label="|LHS|")
        ax.bar(idx + w / 2, rhs, w, label="RHS bound")
        ax.set_xticks(idx)
        ax.set_xticklabels([f"{s:.2g}" for s in scales], fontsize=7)
        ax.set_xlabel("test-function scale")
        ax.set_title(title)
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_conv_lemma(results: dict, path: str) -> list[str]:
    fig, ax = plt.subplots()
    for (d, p), res in results.items():
        ax.plot(res["x"], res["ratios"], "o-", ms=4, label=f"d={d}, p={p}")
    ax.set_xlabel("|x|")
    ax.set_ylabel("lattice sum / reference bound")
    ax.set_xscale("log")
    ax.legend(fontsize=7)
    ax.set_title("convolution-power sums vs reference bounds")
    return _save(fig, path)


def plot_periodic_suite(summary: dict, mixing_curve, path: str) -> list[str]:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    ns = [e["n"] for e in summary["c_refinement"]]
    cs = [max(e["max_abs_c"], 1e-300) for e in summary["c_refinement"]]
    axes[0].loglog(ns, cs, "o-")
    axes[0].set_xlabel("grid n")
    axes[0].set_ylabel("max |c_ijk|")
    axes[0].set_title("third-order constants under refinement")
    axes[1].semilogy(mixing_curve.abscissae, np.abs(mixing_curve.values), "o-")
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("E |E_B g|^2")
    axes[1].set_title(f"mixing rate {mixing_curve.exponent:.2f}")
    return _save(fig, path)
