"""CLI command bodies: run a harness, write tidy CSV/JSON and PNG figures into the output directory."""

import csv
import json
import os

import numpy as np

from .. import kernels, linalg, sampler
from ..errors import ConfigError, DataError
from ..geometry import curves_to_csv
from ..sampler import SpectrumSpec
from . import data as data_mod
from . import figures, harness

SCHEMAS = {
    "srank_gaussian.csv": ("n", "alpha", "empirical_ratio", "predicted_ratio"),
    "normality.csv": ("width", "seed", "regime", "variance", "ks_statistic", "p_value", "n", "passed", "skipped"),
    "qq.csv": ("width", "regime", "sample_quantile", "normal_quantile"),
    "gp_ntk.csv": ("i", "j", "empirical_sigma", "theory_sigma", "sigma_rel_error",
                   "empirical_theta", "theory_theta", "theta_rel_error"),
    "ntk_drift.csv": ("width", "seed", "drift"),
    "curve_lengths.csv": ("stable_rank", "seed", "layer", "length", "mean_curvature", "q_empirical", "q_theory"),
    "toy_training.csv": ("run", "step", "loss", "path_length"),
    "noise_runs.csv": ("srank", "shuffle_fraction", "seed", "train_accuracy", "train_loss"),
    "noise.csv": ("srank", "clean_acc", "clean_std", "shuffled_acc", "shuffled_std"),
    "regularization.csv": ("scheme", "hyperparameter", "mean_test_loss", "mean_accuracy", "std", "models"),
    "sample.csv": ("index", "stable_rank", "spectral_norm", "attempts", "path"),
}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(out_dir, name, rows):
    """Write dict rows with the declared column order for ``name``."""
    header = SCHEMAS[name]
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])
    return path


def write_json(out_dir, name, obj):
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def cmd_srank_gaussian(cfg, out_dir):
    p = cfg.params
    rows = harness.srank_gaussian(cfg.seed, p["sizes"], p["alphas"], p["draws"])
    write_csv(out_dir, "srank_gaussian.csv", rows)
    write_json(out_dir, "srank_gaussian.json", rows)
    figures.srank_gaussian(rows, os.path.join(out_dir, "srank_gaussian.png"))
    return {"rows": rows}


def cmd_normality(cfg, out_dir):
    p = cfg.params
    records, qq = harness.normality(cfg.seed, p["widths"], p["draws"], p["seeds"], p["stable_rank_fraction"],
                                    p["spectral_norm"], p["sigma_b"], p["input_norm"], p["method"], p["alpha"])
    write_csv(out_dir, "normality.csv", records)
    qq_rows = []
    for (width, regime) in sorted(qq):
        sample, normal = qq[(width, regime)]
        qq_rows.extend({"width": width, "regime": regime, "sample_quantile": a, "normal_quantile": b}
                       for a, b in zip(sample, normal))
    write_csv(out_dir, "qq.csv", qq_rows)
    summary = {}
    for rec in records:
        key = f"{rec['width']}/{rec['regime']}"
        summary.setdefault(key, []).append(rec["ks_statistic"])
    summary = {k: {"mean_ks": float(np.mean(v)), "seeds": len(v)} for k, v in sorted(summary.items())}
    write_json(out_dir, "normality_summary.json", summary)
    if qq:
        figures.qq_grid(qq, os.path.join(out_dir, "qq.png"))
    return summary


def cmd_gp_ntk(cfg, out_dir):
    p = cfg.params
    act = p["activation"]
    moments = kernels.ActivationMoments(act)
    n = p["n_points"]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]

    gp = p["gp"]
    widths = [gp["input_dim"]] + [gp["width"]] * gp["depth"]
    specs = harness.balanced_specs(widths, [gp["stable_rank"]] * gp["depth"], p["sigma_b"], p["method"])
    points = harness.make_points(cfg.seed, n, gp["input_dim"])
    emp_sigma, _ = harness.gp_ensemble(cfg.seed, points, specs, act, gp["inits"])
    gp_states = kernels.kernel_recursion(points, harness.layer_geometry(specs), moments, "literal",
                                         bias_constant=p["sigma_b"] ** 2)
    sigma_rows = harness.pair_table(emp_sigma, gp_states[-1].sigma, pairs)

    nt = p["ntk"]
    widths = [nt["input_dim"]] + [nt["width"]] * (nt["depth"] - 1) + [nt["outputs"]]
    ranks = [nt["stable_rank"]] * (nt["depth"] - 1) + [nt["output_stable_rank"]]
    nspecs = harness.balanced_specs(widths, ranks, p["sigma_b"], p["method"])
    npoints = harness.make_points(cfg.seed, n, nt["input_dim"])
    emp_theta, ratios = harness.ntk_check(cfg.seed + 1, npoints, nspecs, act, nt["inits"])
    ntk_states = kernels.kernel_recursion(npoints, harness.layer_geometry(nspecs), moments, "literal",
                                          bias_constant=1.0)
    theta_rows = harness.pair_table(emp_theta, ntk_states[-1].theta, pairs)

    rows = [{"i": s[0], "j": s[1], "empirical_sigma": s[2], "theory_sigma": s[3], "sigma_rel_error": s[4],
             "empirical_theta": t[2], "theory_theta": t[3], "theta_rel_error": t[4]}
            for s, t in zip(sigma_rows, theta_rows)]
    write_csv(out_dir, "gp_ntk.csv", rows)
    kernels.write_trace_json(os.path.join(out_dir, "gp_trace.json"), gp_states)
    kernels.write_trace_json(os.path.join(out_dir, "ntk_trace.json"), ntk_states)
    kernels_path = os.path.join(out_dir, "ntk_theory.bin")
    linalg.save_matrix(kernels_path, ntk_states[-1].theta)

    dr = p["drift"]
    drifts = {}
    drift_rows = []
    dpoints = harness.make_points(cfg.seed, n, nt["input_dim"])
    targets = linalg.derive_rng(cfg.seed, 104729).standard_normal((n, nt["outputs"]))
    for w in dr["widths"]:
        dspecs = harness.drift_specs(nt["input_dim"], w, nt["outputs"], dr["stable_rank_fraction"], p["sigma_b"])
        vals = harness.ntk_drift(cfg.seed + 2, dpoints, targets, dspecs, act, dr["steps"], dr["learning_rate"],
                                 dr["seeds"])
        drifts[w] = vals
        drift_rows.extend({"width": w, "seed": k, "drift": v} for k, v in enumerate(vals))
    write_csv(out_dir, "ntk_drift.csv", drift_rows)
    summary = {
        "max_sigma_rel_error_offdiag": max(r["sigma_rel_error"] for r in rows if r["i"] != r["j"]),
        "max_theta_rel_error_offdiag": max(r["theta_rel_error"] for r in rows if r["i"] != r["j"]),
        "off_diagonal_ratio": ratios,
        "mean_drift": {str(w): float(np.mean(v)) for w, v in drifts.items()},
    }
    write_json(out_dir, "gp_ntk_summary.json", summary)
    figures.kernel_scatter(sigma_rows, theta_rows, os.path.join(out_dir, "gp_ntk.png"))
    figures.drift_bars(drifts, os.path.join(out_dir, "ntk_drift.png"))
    return summary


def cmd_curve(cfg, out_dir):
    p = cfg.params
    records, curves = harness.curve_experiment(
        cfg.seed, p["width"], p["depth"], p["stable_ranks"], p["spectral_norm"], p["activation"], p["seeds"],
        p["n_points"], p["sigma_b"], p["gamma_mode"], p["radius"], p["method"], keep_curves_for_seed=0)
    write_csv(out_dir, "curve_lengths.csv", records)
    for r, cs in sorted(curves.items()):
        with open(os.path.join(out_dir, f"curve_r{r:g}.csv"), "w", newline="") as f:
            f.write(curves_to_csv(cs))
    summary = []
    for r in sorted({row["stable_rank"] for row in records}):
        for layer in range(1, p["depth"] + 1):
            sel = [row for row in records if row["stable_rank"] == r and row["layer"] == layer]
            summary.append({"stable_rank": r, "layer": layer,
                            "length": float(np.mean([s["length"] for s in sel])),
                            "mean_curvature": float(np.mean([s["mean_curvature"] for s in sel]))})
    write_json(out_dir, "curve_summary.json", summary)
    figures.curve_lengths(records, os.path.join(out_dir, "curve_lengths.png"))
    return {"output_length": harness.mean_output_lengths(records, p["depth"])}


def cmd_toy_training(cfg, out_dir):
    p = cfg.params
    summary, runs = harness.toy_training(p["x_diag"], p["y_diag"], p["w0_diag"], p["learning_rate"], p["steps"])
    every = p["record_every"]
    rows = []
    for name in sorted(runs):
        run = runs[name]
        last = run.loss.size - 1
        for t in range(0, run.loss.size):
            if t % every == 0 or t == last:
                rows.append({"run": name, "step": t, "loss": run.loss[t], "path_length": run.path_length[t]})
    write_csv(out_dir, "toy_training.csv", rows)
    write_json(out_dir, "toy_training_summary.json", summary)
    figures.toy_training(runs, summary["w_star_diag"], os.path.join(out_dir, "toy_training.png"))
    return summary


def _load_mnist(p, seed):
    """Train/test datasets from IDX files, or synthetic blobs when no paths are configured."""
    rng = linalg.derive_rng(seed, 15485863)
    if p["images"] is None or p["labels"] is None:
        full = data_mod.gaussian_blobs(rng, p["train_size"] + p["test_size"], 784, p["synthetic_classes"],
                                       p["synthetic_separation"])
        idx = np.arange(len(full))
        return full.subset(idx[:p["train_size"]]), full.subset(idx[p["train_size"]:]), "synthetic_blobs"
    train = data_mod.load_idx(p["images"], p["labels"])
    if p["train_size"] > len(train):
        raise DataError(f"requested {p['train_size']} training examples, file has {len(train)}")
    order = rng.permutation(len(train))
    if p["test_images"] is not None and p["test_labels"] is not None:
        test = data_mod.load_idx(p["test_images"], p["test_labels"])
        test = test.subset(np.sort(rng.permutation(len(test))[:min(p["test_size"], len(test))]))
    else:
        rest = order[p["train_size"]:p["train_size"] + p["test_size"]]
        if rest.size == 0:
            raise DataError("no examples left for a test split")
        test = train.subset(np.sort(rest))
    return train.subset(np.sort(order[:p["train_size"]])), test, "idx"


def cmd_mnist(cfg, out_dir):
    p = cfg.params
    train, test, source = _load_mnist(p, cfg.seed)
    nz = p["noise"]
    runs = harness.noise_fitting(cfg.seed, train, p["hidden"], nz["srank_targets"], nz["shuffle_fractions"],
                                 nz["seeds"], nz["epochs"], nz["batch_size"], nz["learning_rate"],
                                 nz["spectral_norm"], nz["method"])
    write_csv(out_dir, "noise_runs.csv", runs)
    noise = harness.summarize_noise(runs)
    write_csv(out_dir, "noise.csv", noise)
    rg = p["regularization"]
    reg = harness.regularization(cfg.seed, train, test, p["hidden"], rg["models"], rg["epochs"], rg["batch_size"],
                                 rg["learning_rate"], rg["l1"], rg["l2"], rg["srank_init"])
    write_csv(out_dir, "regularization.csv", reg)
    summary = {"dataset": source, "train_size": len(train), "test_size": len(test), "noise": noise,
               "regularization": reg}
    write_json(out_dir, "mnist_summary.json", summary)
    figures.noise_fitting(noise, os.path.join(out_dir, "noise_fitting.png"))
    figures.regularization(reg, os.path.join(out_dir, "regularization.png"))
    return {"dataset": source, "noise": noise}


def cmd_sample(cfg, out_dir):
    p = cfg.params
    if p["format"] not in ("binary", "csv"):
        raise ConfigError(f"format must be 'binary' or 'csv', got {p['format']!r}")
    spec = SpectrumSpec(p["stable_rank"], p["spectral_norm"])
    rows = []
    for i in range(p["count"]):
        rng = linalg.derive_rng(cfg.seed, i)
        d, attempts = sampler.sample_spectrum(rng, spec, p["n_out"], p["n_in"], p["method"], p["max_attempts"])
        w = sampler.weight_from_spectrum(rng, d, p["n_out"], p["n_in"])
        name = f"weight_{i:03d}." + ("bin" if p["format"] == "binary" else "csv")
        path = os.path.join(out_dir, name)
        if p["format"] == "binary":
            linalg.save_matrix(path, w)
        else:
            linalg.save_matrix_csv(path, w)
        rows.append({"index": i, "stable_rank": linalg.stable_rank(w), "spectral_norm": linalg.spectral_norm(w),
                     "attempts": attempts, "path": name})
    write_csv(out_dir, "sample.csv", rows)
    return {"count": len(rows), "max_srank_error": max(abs(r["stable_rank"] - spec.stable_rank) for r in rows)}


COMMANDS = {
    "srank-gaussian": cmd_srank_gaussian,
    "normality": cmd_normality,
    "gp-ntk": cmd_gp_ntk,
    "curve": cmd_curve,
    "toy-training": cmd_toy_training,
    "mnist": cmd_mnist,
    "sample": cmd_sample,
}


def run(cfg):
    out_dir = cfg.output_dir or os.path.join("srnet-out", cfg.command)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir} is not writable")
    return out_dir, COMMANDS[cfg.command](cfg, out_dir)


__all__ = ["COMMANDS", "SCHEMAS", "run", "write_csv", "write_json"]
