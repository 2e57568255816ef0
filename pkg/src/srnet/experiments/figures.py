"""Matplotlib figures written next to the CSV results (Agg backend, PNG)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def srank_gaussian(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for alpha in sorted({r["alpha"] for r in rows}):
        sel = [r for r in rows if r["alpha"] == alpha]
        ns = [r["n"] for r in sel]
        ax.plot(ns, [r["empirical_ratio"] for r in sel], "o-", label=f"alpha={alpha:g} empirical")
        ax.axhline(sel[0]["predicted_ratio"], ls="--", lw=0.8, color=ax.lines[-1].get_color())
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("srank / n")
    ax.legend(fontsize=7)
    _save(fig, path)


def qq_grid(qq, path):
    keys = sorted(qq)
    widths = sorted({k[0] for k in keys})
    regimes = sorted({k[1] for k in keys})
    fig, axes = plt.subplots(len(widths), len(regimes), figsize=(3 * len(regimes), 3 * len(widths)), squeeze=False)
    for i, w in enumerate(widths):
        for j, reg in enumerate(regimes):
            ax = axes[i, j]
            if (w, reg) not in qq:
                ax.set_axis_off()
                continue
            sample, normal = qq[(w, reg)]
            ax.plot(normal, sample, ".", ms=1)
            lim = [normal.min(), normal.max()]
            ax.plot(lim, lim, "k--", lw=0.8)
            ax.set_title(f"N={w}, {reg}", fontsize=8)
    _save(fig, path)


def kernel_scatter(rows_sigma, rows_theta, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, rows, name in ((axes[0], rows_sigma, "Sigma"), (axes[1], rows_theta, "Theta")):
        emp = np.array([r[2] for r in rows])
        th = np.array([r[3] for r in rows])
        ax.plot(th, emp, "o")
        lim = [min(th.min(), emp.min()), max(th.max(), emp.max())]
        ax.plot(lim, lim, "k--", lw=0.8)
        ax.set_xlabel(f"theory {name}")
        ax.set_ylabel(f"empirical {name}")
    _save(fig, path)


def drift_bars(drifts, path):
    fig, ax = plt.subplots(figsize=(4, 3.5))
    widths = sorted(drifts)
    means = [np.mean(drifts[w]) for w in widths]
    ax.bar([str(w) for w in widths], means, yerr=[np.std(drifts[w]) for w in widths])
    ax.set_xlabel("width")
    ax.set_ylabel("relative NTK drift")
    _save(fig, path)


def curve_lengths(records, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in sorted({row["stable_rank"] for row in records}):
        layers = sorted({row["layer"] for row in records if row["stable_rank"] == r})
        means = [np.mean([row["length"] for row in records if row["stable_rank"] == r and row["layer"] == l])
                 for l in layers]
        ax.semilogy(layers, means, "o-", label=f"r={r:g}")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean curve length")
    ax.legend()
    _save(fig, path)


def toy_training(runs, w_star, path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for name, run in runs.items():
        axes[0].plot(run.diagonals[:, 0], run.diagonals[:, 2], label=name)
        axes[1].semilogy(np.maximum(run.loss, 1e-300), label=name)
    axes[0].plot([w_star[0]], [w_star[2]], "k*")
    axes[0].set_xlabel("W_11")
    axes[0].set_ylabel("W_33")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    _save(fig, path)


def noise_fitting(summary, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    r = [row["srank"] for row in summary]
    ax.errorbar(r, [row["clean_acc"] for row in summary], [row["clean_std"] for row in summary],
                fmt="o-", label="clean")
    ax.errorbar(r, [row["shuffled_acc"] for row in summary], [row["shuffled_std"] for row in summary],
                fmt="s-", label="shuffled")
    ax.set_xlabel("stable rank")
    ax.set_ylabel("train accuracy")
    ax.legend()
    _save(fig, path)


def regularization(rows, path):
    schemes = sorted({row["scheme"] for row in rows})
    fig, axes = plt.subplots(1, len(schemes), figsize=(3.5 * len(schemes), 3.2), squeeze=False)
    for ax, scheme in zip(axes[0], schemes):
        sel = [row for row in rows if row["scheme"] == scheme]
        ax.errorbar(range(len(sel)), [row["mean_accuracy"] for row in sel], [row["std"] for row in sel], fmt="o-")
        ax.set_xticks(range(len(sel)))
        ax.set_xticklabels([f"{row['hyperparameter']:g}" for row in sel], fontsize=7)
        ax.set_title(scheme)
        ax.set_ylabel("test accuracy")
    _save(fig, path)
