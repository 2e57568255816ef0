"""Acceptance criteria run at full size; each prints one PASS/FAIL line."""

import math
import os
import time

import numpy as np
import pytest
from scipy import special

from srnet import geometry, kernels, linalg, network, sampler
from srnet.experiments import commands, harness
from srnet.experiments.config import default_params
from srnet.geometry import CurveGeometry, GeometryLayer, LengthState
from srnet.kernels import ActivationMoments
from srnet.network import GaussianInit, LayerSpec
from srnet.sampler import SpectrumSpec

from oracles import central_difference, gaussian_weight_length_step

SEED = 20240601


@pytest.fixture
def report(capsys):
    def emit(number, name, passed, detail, started):
        elapsed = time.perf_counter() - started
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail} ({elapsed:.1f} s)")
        return elapsed
    return emit


def test_c01_gaussian_srank_ratio(report):
    t0 = time.perf_counter()
    (row,) = harness.srank_gaussian(SEED, [2000], [1.0], 10)
    ratio = row["empirical_ratio"]
    elapsed = time.perf_counter() - t0
    ok = 0.245 <= ratio <= 0.255 and elapsed < 60
    report(1, "gaussian srank/N", ok, f"ratio {ratio:.5f} in [0.245, 0.255]", t0)
    assert 0.245 <= ratio <= 0.255
    assert elapsed < 60


def test_c02_sampler_exactness(report):
    t0 = time.perf_counter()
    spec = SpectrumSpec(10.0, 1.0)
    rng = linalg.make_rng(SEED)
    srank_err = norm_exact = w_srank_err = w_norm_err = 0.0
    all_exact = True
    for _ in range(10_000):
        d, _ = sampler.sample_spectrum(rng, spec, 100, 100, "sphere")
        srank_err = max(srank_err, abs(float(np.sum(d**2) / d[0] ** 2) - 10.0))
        all_exact &= bool(d[0] == 1.0)
        w = sampler.weight_from_spectrum(rng, d, 100, 100)
        s = linalg.singular_values(w)
        w_srank_err = max(w_srank_err, abs(float(np.sum(s**2) / s[0] ** 2) - 10.0))
        w_norm_err = max(w_norm_err, abs(float(s[0]) - 1.0))
    elapsed = time.perf_counter() - t0
    ok = srank_err <= 1e-8 and all_exact and w_srank_err <= 1e-8 and w_norm_err <= 1e-8 and elapsed < 60
    report(2, "sampler exactness", ok,
           f"spectrum srank err {srank_err:.1e}, s1==1 {all_exact}; weight srank err {w_srank_err:.1e}, "
           f"norm err {w_norm_err:.1e}", t0)
    assert srank_err <= 1e-8 and all_exact
    assert w_srank_err <= 1e-8 and w_norm_err <= 1e-8
    assert elapsed < 60


def test_c03_moment_identity(report):
    t0 = time.perf_counter()
    spec = SpectrumSpec(5.0, 2.0)
    mean, se = sampler.empirical_weight_moments(linalg.make_rng(SEED), spec, 20, 30, 100_000,
                                                [((0, 0), (0, 0)), ((0, 0), (1, 1))])
    target = 4.0 * 5.0 / 600.0
    z_diag = (mean[0] - target) / se[0]
    z_off = mean[1] / se[1]
    elapsed = time.perf_counter() - t0
    ok = abs(z_diag) <= 3 and abs(z_off) <= 3 and elapsed < 300
    report(3, "second moments", ok,
           f"E[W11^2] {mean[0]:.6f} vs {target:.6f} (z {z_diag:+.2f}); E[W11 W22] {mean[1]:+.2e} (z {z_off:+.2f})", t0)
    assert abs(z_diag) <= 3 and abs(z_off) <= 3
    assert elapsed < 300


def test_c04_acceptance_bound(report):
    t0 = time.perf_counter()
    etas = np.linspace(0.1, 3.0, 581)
    res = harness.acceptance_frequency(SEED, 101, 2.0, 20_000, etas)
    lower = res["bound"] - 3 * res["std_error"]
    elapsed = time.perf_counter() - t0
    ok = res["frequency"] > lower and elapsed < 120
    report(4, "acceptance bound", ok,
           f"frequency {res['frequency']:.6f} > bound {res['bound']:.10g} (eta {res['eta']:.3f}) - 3 se", t0)
    assert res["frequency"] > lower
    assert elapsed < 120


def test_c05_single_layer_normality(report):
    t0 = time.perf_counter()
    p = default_params("normality")
    records, _ = harness.normality(SEED, [32, 2000], 10_000, 5, p["stable_rank_fraction"], p["spectral_norm"],
                                   method=p["method"], keep_samples_for_seed=None)
    wide = [r for r in records if r["width"] == 2000 and r["seed"] == 0]
    p_wide = {r["regime"]: r["p_value"] for r in wide}
    ks = {w: np.mean([r["ks_statistic"] for r in records if r["width"] == w and r["regime"] == "joint"])
          for w in (32, 2000)}
    elapsed = time.perf_counter() - t0
    ok = all(r["passed"] for r in wide) and ks[32] > ks[2000] and elapsed < 300
    report(5, "single-layer normality", ok,
           "p at 2000: " + ", ".join(f"{k} {v:.3f}" for k, v in sorted(p_wide.items()))
           + f"; mean KS 32 {ks[32]:.4f} > 2000 {ks[2000]:.4f}", t0)
    assert all(r["passed"] for r in wide)
    assert ks[32] > ks[2000]
    assert elapsed < 300


def _offdiag_pairs(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def test_c06_gp_finite_width(report):
    t0 = time.perf_counter()
    p = default_params("gp-ntk")
    gp = dict(p["gp"], width=2000, depth=3, inits=200)
    widths = [gp["input_dim"]] + [gp["width"]] * gp["depth"]
    specs = harness.balanced_specs(widths, [gp["stable_rank"]] * gp["depth"], p["sigma_b"], p["method"])
    points = harness.make_points(SEED, 4, gp["input_dim"])
    emp, _ = harness.gp_ensemble(SEED, points, specs, "erf", gp["inits"])
    states = kernels.kernel_recursion(points, harness.layer_geometry(specs), ActivationMoments("erf"), "literal",
                                      bias_constant=p["sigma_b"] ** 2)
    rows = harness.pair_table(emp, states[-1].sigma, _offdiag_pairs(4))
    worst = max(r[4] for r in rows)
    elapsed = time.perf_counter() - t0
    ok = len(rows) == 6 and worst <= 0.05 and elapsed < 600
    report(6, "GP covariance at width 2000", ok, f"max rel error over 6 pairs {worst:.4f} <= 0.05", t0)
    assert worst <= 0.05
    assert elapsed < 600


def test_c07_ntk_finite_width(report):
    t0 = time.perf_counter()
    p = default_params("gp-ntk")
    nt = dict(p["ntk"], width=1000, depth=3)
    widths = [nt["input_dim"]] + [nt["width"]] * (nt["depth"] - 1) + [nt["outputs"]]
    ranks = [nt["stable_rank"]] * (nt["depth"] - 1) + [nt["output_stable_rank"]]
    specs = harness.balanced_specs(widths, ranks, p["sigma_b"], p["method"])
    points = harness.make_points(SEED, 4, nt["input_dim"])
    emp, ratios = harness.ntk_check(SEED, points, specs, "erf", nt["inits"])
    states = kernels.kernel_recursion(points, harness.layer_geometry(specs), ActivationMoments("erf"), "literal")
    rows = harness.pair_table(emp, states[-1].theta, _offdiag_pairs(4))
    worst = max(r[4] for r in rows)
    ratio = max(ratios)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.10 and ratio <= 0.15 and elapsed < 600
    report(7, "NTK at width 1000", ok,
           f"max rel error over 6 pairs {worst:.4f} <= 0.10; off-diagonal mass {ratio:.4f} <= 0.15", t0)
    assert worst <= 0.10 and ratio <= 0.15
    assert elapsed < 600


def test_c08_ntk_drift(report):
    t0 = time.perf_counter()
    p = default_params("gp-ntk")
    nt, dr = p["ntk"], p["drift"]
    points = harness.make_points(SEED, p["n_points"], nt["input_dim"])
    targets = linalg.derive_rng(SEED, 104729).standard_normal((p["n_points"], nt["outputs"]))
    means = {}
    for width in (1000, 50):
        specs = harness.drift_specs(nt["input_dim"], width, nt["outputs"], dr["stable_rank_fraction"], p["sigma_b"])
        means[width] = float(np.mean(harness.ntk_drift(SEED, points, targets, specs, "erf", 500,
                                                       dr["learning_rate"], 5)))
    elapsed = time.perf_counter() - t0
    ok = means[1000] <= 0.05 and means[50] > means[1000] and elapsed < 600
    report(8, "NTK drift in training", ok,
           f"mean drift width 1000 {means[1000]:.4f} <= 0.05, width 50 {means[50]:.4f}", t0)
    assert means[1000] <= 0.05 and means[50] > means[1000]
    assert elapsed < 600


def test_c09_curve_geometry(report):
    t0 = time.perf_counter()
    p = default_params("curve")
    records, _ = harness.curve_experiment(SEED, 200, 5, [5.0, 50.0, 200.0], p["spectral_norm"], p["activation"], 10,
                                          p["n_points"], p["sigma_b"], p["gamma_mode"], p["radius"], p["method"])
    lengths = harness.mean_output_lengths(records, 5)
    seq = [lengths[r] for r in (5.0, 50.0, 200.0)]
    increasing = all(b > a for a, b in zip(seq, seq[1:]))

    sw2, sb2 = 1.7, 0.05
    layer = GeometryLayer(10, 10, 4.0, math.sqrt(sw2 * 10 / 4.0), 1.0, math.sqrt(sb2))
    worst_q = 0.0
    for act, fn in (("tanh", np.tanh), ("erf", special.erf)):
        moments = ActivationMoments(act, order=60)
        for q in (0.1, 0.5, 1.0, 2.0, 4.0):
            for c in (-0.95, -0.3, 0.0, 0.5, 0.99):
                s = (q, 1.3 * q, c * q * math.sqrt(1.3))
                lib = geometry.propagate_length(LengthState(*s), layer, moments)
                ref = gaussian_weight_length_step(*s, sw2, sb2, fn, order=60)
                worst_q = max(worst_q, float(np.abs(np.array([lib.q11, lib.q22, lib.q12]) - ref).max()))

    lin = GeometryLayer(10, 10, 4.0, math.sqrt(1.3 * 10 / 4.0))
    chi1, _ = geometry.curvature_chis(1.0, lin, ActivationMoments("identity"))
    geo = CurveGeometry(0.7, 2.0, 1.0)
    for _ in range(6):
        geo = geometry.propagate_curvature(geo, lin, ActivationMoments("identity"))
    curv_err = max(abs(geo.g - 0.7 * chi1**6) / (0.7 * chi1**6), abs(geo.kappa_sq - 2.0 / chi1**6) / (2.0 / chi1**6))

    elapsed = time.perf_counter() - t0
    ok = increasing and worst_q <= 1e-10 and curv_err <= 1e-12 and elapsed < 300
    report(9, "curve geometry", ok,
           "output length " + " < ".join(f"{v:.3f}" for v in seq)
           + f"; length map vs independent recursion {worst_q:.1e}; identity curvature {curv_err:.1e}", t0)
    assert increasing
    assert worst_q <= 1e-10
    assert curv_err <= 1e-12
    assert elapsed < 300


def test_c10_toy_training(report):
    t0 = time.perf_counter()
    p = default_params("toy-training")
    assert p["learning_rate"] <= 1e-3
    summary, _ = harness.toy_training(p["x_diag"], p["y_diag"], p["w0_diag"], p["learning_rate"], p["steps"])
    un, pr = summary["unconstrained"], summary["projected"]
    close = abs(un["path_ratio"] - 1.0) <= 0.01
    elapsed = time.perf_counter() - t0
    ok = close and summary["projected_not_shorter"] and un["loss_monotone"] and pr["loss_monotone"] and elapsed < 60
    report(10, "toy least squares", ok,
           f"unconstrained path / straight line {un['path_ratio']:.4f} (need within 1%); projected "
           f"{pr['path_ratio']:.4f} >= unconstrained {summary['projected_not_shorter']}; monotone "
           f"{un['loss_monotone']}/{pr['loss_monotone']}", t0)
    assert summary["projected_not_shorter"]
    assert un["loss_monotone"] and pr["loss_monotone"]
    assert elapsed < 60
    assert close


def test_c11_gradient_correctness(report):
    t0 = time.perf_counter()
    widths = (8, 8, 8, 8)
    specs = [LayerSpec(a, b, GaussianInit(1.0, 0.3), "inv_sqrt_fanin") for a, b in zip(widths, widths[1:])]
    net = network.init_network(linalg.make_rng(SEED), specs, "tanh")
    rng = linalg.make_rng(SEED + 1)
    x = rng.standard_normal((6, 8))
    worst = 0.0
    ok = True
    for loss, y in (("squared_error", rng.standard_normal((6, 8))), ("softmax_cross_entropy", rng.integers(0, 8, 6))):
        _, grads = network.gradient(net, x, y, loss)
        for layer, g in zip(net.layers, grads):
            for param, analytic in ((layer.weight, g.weight), (layer.bias, g.bias)):
                numeric = central_difference(lambda: network.loss_value(net, x, y, loss), param)
                err = np.abs(analytic - numeric)
                ok &= bool(np.all(err <= np.maximum(1e-6, 1e-4 * np.abs(numeric))))
                worst = max(worst, float(err.max()))
    report(11, "gradient vs finite differences", ok, f"max abs deviation {worst:.1e}", t0)
    assert ok


def _mnist_params():
    p = default_params("mnist")
    root = os.environ.get("SRNET_MNIST_DIR")
    if root:
        imgs = os.path.join(root, "train-images-idx3-ubyte")
        labs = os.path.join(root, "train-labels-idx1-ubyte")
        if os.path.exists(imgs) and os.path.exists(labs):
            p["images"], p["labels"] = imgs, labs
    return p


def test_c12_noise_fitting_direction(report):
    t0 = time.perf_counter()
    p = _mnist_params()
    train, _, source = commands._load_mnist(p, SEED)
    nz = p["noise"]
    targets = [20.0, 75.0, 187.0]
    runs = harness.noise_fitting(SEED, train, 750, targets, [0.0, 1.0], 5, nz["epochs"], nz["batch_size"],
                                 nz["learning_rate"], nz["spectral_norm"], nz["method"])
    table = {row["srank"]: row for row in harness.summarize_noise(runs)}
    clean = [table[r]["clean_acc"] for r in targets]
    noisy = [table[r]["shuffled_acc"] for r in targets]
    below = all(n <= c for n, c in zip(noisy, clean))
    mono = all(np.all(np.diff(v) >= 0) for v in (clean, noisy))
    elapsed = time.perf_counter() - t0
    ok = len(train) == 1000 and below and mono and elapsed < 1800
    report(12, f"noise fitting direction ({source})", ok,
           "clean " + "/".join(f"{v:.3f}" for v in clean) + ", shuffled " + "/".join(f"{v:.3f}" for v in noisy)
           + f" at srank {'/'.join(f'{r:g}' for r in targets)}", t0)
    assert len(train) == 1000
    assert below and mono
    assert elapsed < 1800
