"""Experiment computations shared by the CLI and the acceptance suite.

Every routine takes an integer seed and derives an independent generator per
ensemble member with :func:`srnet.linalg.derive_rng`, so results do not depend
on thread scheduling.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .. import geometry, kernels, linalg, network, sampler
from ..activations import get_activation
from ..errors import ConfigError, RejectionBudgetExhausted
from ..sampler import SpectrumSpec
from . import data as data_mod
from . import stats

REGIMES = ("fix_u_s", "fix_v_s", "joint")


def thread_count():
    raw = os.environ.get("SRNET_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SRNET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn, items, threads=None):
    """Ordered map, optionally over a thread pool capped by ``SRNET_THREADS``."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- Gaussian srank


def srank_gaussian(seed, sizes, alphas, draws):
    """Rows ``(n, alpha, empirical_ratio, predicted_ratio, std_error)`` for ``n x round(alpha n)`` Gaussian matrices."""

    def one(job):
        si, ai, d = job
        n, alpha = sizes[si], alphas[ai]
        n_in = max(1, int(round(alpha * n)))
        g = linalg.sample_gaussian_matrix(linalg.derive_rng(seed, si, ai, d), n, n_in, 1.0)
        return linalg.stable_rank(g) / n

    jobs = [(si, ai, d) for si in range(len(sizes)) for ai in range(len(alphas)) for d in range(draws)]
    vals = dict(zip(jobs, parallel_map(one, jobs)))
    rows = []
    for si, n in enumerate(sizes):
        for ai, alpha in enumerate(alphas):
            r = np.array([vals[(si, ai, d)] for d in range(draws)])
            n_in = max(1, int(round(alpha * n)))
            rows.append({
                "n": n,
                "alpha": n_in / n,
                "empirical_ratio": float(r.mean()),
                "predicted_ratio": network.gaussian_srank_ratio(n, n_in),
                "std_error": float(r.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan"),
            })
    return rows


# ---------------------------------------------------------------- sampler checks


def acceptance_frequency(seed, m, stable_rank, runs, etas, erf_convention="gaussian_integral"):
    """Single-proposal runs of the sphere sampler versus the best acceptance bound over ``etas``."""
    rng = linalg.make_rng(seed)
    spec = SpectrumSpec(stable_rank, 1.0)
    accepted = 0
    for _ in range(runs):
        try:
            sampler.sample_singular_spectrum_sphere(rng, spec, m, m, max_attempts=1)
            accepted += 1
        except RejectionBudgetExhausted:
            pass
    freq = accepted / runs
    eta, bound = sampler.best_acceptance_bound(m, stable_rank, etas, erf_convention)
    return {"runs": runs, "accepted": accepted, "frequency": freq,
            "std_error": stats.binomial_se(freq, runs), "eta": eta, "bound": bound}


# ---------------------------------------------------------------- single-layer normality


def _unit_rows(rng, count, n, m):
    v = rng.standard_normal((count, n))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[:, :m]


def normality_samples(rng, n_in, n_out, spec, regime, draws, x_norm=1.0, sigma_b=0.0, method="sphere",
                      chunk=1000):
    """Draws of one output coordinate ``f_1 = (W x)_1 + b_1`` of a stable-rank layer, with its theoretical variance.

    ``f_1 = ||x|| sum_a u_a d_a v_a`` where ``u`` (row of ``U``) and ``v``
    (``V^T x / ||x||``) are uniform unit vectors. Regimes: ``fix_u_s`` keeps
    ``u`` and the spectrum fixed and resamples ``V``; ``fix_v_s`` keeps ``V``
    and the spectrum and resamples ``U``; ``joint`` resamples everything.
    """
    m = min(n_in, n_out)
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    out = np.empty(draws)
    if regime == "joint":
        for i in range(draws):
            d, _ = sampler.sample_spectrum(rng, spec, n_out, n_in, method)
            u = _unit_rows(rng, 1, n_out, m)[0]
            v = _unit_rows(rng, 1, n_in, m)[0]
            out[i] = x_norm * float(np.sum(u * d * v))
        var = spec.frobenius_sq * x_norm**2 / (n_in * n_out)
    else:
        d, _ = sampler.sample_spectrum(rng, spec, n_out, n_in, method)
        fixed = _unit_rows(rng, 1, n_out if regime == "fix_u_s" else n_in, m)[0]
        w = fixed * d
        for start in range(0, draws, chunk):
            k = min(chunk, draws - start)
            free = _unit_rows(rng, k, n_in if regime == "fix_u_s" else n_out, m)
            out[start:start + k] = x_norm * (free @ w)
        if regime == "fix_u_s":
            var = x_norm**2 / n_in * float(np.sum(w * w))
        else:
            var = x_norm**2 / n_out * float(np.sum(w * w))
    if sigma_b > 0:
        out += sigma_b * rng.standard_normal(draws)
    return out, var + sigma_b**2


def normality(seed, widths, draws, seeds, stable_rank_fraction, spectral_norm, sigma_b=0.0,
              x_norm=1.0, method="sphere", alpha=0.01, keep_samples_for_seed=0):
    """KS records per ``(width, seed, regime)`` and QQ data for one seed.

    Returns ``(records, qq)`` where ``qq[(width, regime)] = (sorted_samples, normal_quantiles)``.
    """
    jobs = [(wi, k, ri) for wi in range(len(widths)) for k in range(seeds) for ri in range(len(REGIMES))]

    def one(job):
        wi, k, ri = job
        n = widths[wi]
        spec = SpectrumSpec(max(1.0, stable_rank_fraction * n), spectral_norm)
        rng = linalg.derive_rng(seed, wi, k, ri)
        samples, var = normality_samples(rng, n, n, spec, REGIMES[ri], draws, x_norm, sigma_b, method)
        if var == 0.0:
            rep = stats.StatReport(REGIMES[ri], float("nan"), None, alpha, False, draws, skipped=True)
        else:
            rep = stats.ks_normal(samples, var, REGIMES[ri], alpha)
        return samples if k == keep_samples_for_seed else None, var, rep

    results = parallel_map(one, jobs)
    records, qq = [], {}
    for (wi, k, ri), (samples, var, rep) in zip(jobs, results):
        records.append({
            "width": widths[wi], "seed": k, "regime": REGIMES[ri],
            "variance": var, "ks_statistic": rep.statistic,
            "p_value": rep.p_value if rep.p_value is not None else float("nan"),
            "n": rep.n, "passed": rep.passed, "skipped": rep.skipped,
        })
        if samples is not None and not rep.skipped:
            qq[(widths[wi], REGIMES[ri])] = stats.qq_pairs(samples, var)
    return records, qq


# ---------------------------------------------------------------- network geometries


def make_points(seed, n_points, dim, correlation=0.6):
    """Inputs with exact Gram matrix ``D C D``: ``C_ij = correlation^|i-j|`` and norms from 0.8 to 1.4."""
    rng = linalg.derive_rng(seed, 7919)
    q = linalg.sample_haar_orthogonal(rng, dim, n_points)
    idx = np.arange(n_points)
    c = correlation ** np.abs(idx[:, None] - idx[None, :])
    norms = np.linspace(0.8, 1.4, n_points) if n_points > 1 else np.ones(1)
    chol = np.linalg.cholesky(c)
    return norms[:, None] * (chol @ q.T)


def balanced_specs(widths, stable_ranks, sigma_b, method="sphere"):
    """Layers with ``s_l^2 r_l = N_l N_{l-1}``, ``gamma_1 = 1`` and ``gamma_l = 1/sqrt(N_{l-1})`` afterwards.

    In this geometry the literal and the network-exact kernel recursions
    coincide. A stable rank equal to the layer's minimal dimension uses the
    flat full-rank spectrum.
    """
    specs = []
    for l in range(1, len(widths)):
        n_in, n_out = widths[l - 1], widths[l]
        r = float(stable_ranks[l - 1])
        spec = SpectrumSpec(r, math.sqrt(n_in * n_out / r))
        init = network.StableRankInit(spec, sigma_b=sigma_b, method=method, full_rank="exact")
        specs.append(network.LayerSpec(n_in, n_out, init, "one" if l == 1 else "inv_sqrt_fanin"))
    return specs


def layer_geometry(specs):
    """:class:`kernels.LayerGeometry` list matching stable-rank layer specs."""
    out = []
    for sp in specs:
        init = sp.init
        out.append(kernels.LayerGeometry(sp.n_out, init.spec.stable_rank, init.spec.spectral_norm,
                                         sp.gamma, init.bias_std(sp.n_in, sp.n_out) if sp.bias else 0.0))
    return out


def gp_ensemble(seed, points, specs, activation, inits):
    """Mean and standard error over inits of the output second moment ``(1/N_L) f(X) f(X)^T``.

    Each layer's action on the batch is drawn exactly in distribution via
    :func:`sampler.sample_weight_action`, so full weight matrices are never formed.
    """
    phi = get_activation(activation)
    x = np.asarray(points, dtype=np.float64)

    def one(i):
        rng = linalg.derive_rng(seed, i)
        a = x.T
        for l, sp in enumerate(specs):
            init = sp.init
            act = sampler.sample_weight_action(rng, init.spec, sp.n_out, sp.n_in, a, init.method,
                                               full_rank=init.full_rank)
            pre = sp.gamma * act
            if sp.bias:
                pre = pre + init.bias_std(sp.n_in, sp.n_out) * rng.standard_normal(sp.n_out)[:, None]
            a = pre if l == len(specs) - 1 else phi(pre)
        return a.T @ a / a.shape[0]

    mats = np.array(parallel_map(one, range(inits)))
    return mats.mean(axis=0), mats.std(axis=0, ddof=1) / math.sqrt(inits)


def ntk_check(seed, points, specs, activation, inits=1):
    """Empirical NTK statistics: output-averaged diagonal blocks (mean over inits) and per-init off-diagonal ratios."""
    avgs, ratios = [], []
    for i in range(inits):
        net = network.init_network(linalg.derive_rng(seed, i), specs, activation)
        blocks = kernels.empirical_ntk_blocks(net, points)
        avgs.append(kernels.ntk_output_average(blocks))
        ratios.append(kernels.off_diagonal_ratio(blocks))
    return np.mean(avgs, axis=0), ratios


def drift_specs(input_dim, width, outputs, stable_rank_fraction, sigma_b=1.0):
    r = max(1.0, stable_rank_fraction * width)
    return balanced_specs([input_dim, width, width, outputs], [min(r, input_dim, width), r, outputs], sigma_b)


def ntk_drift(seed, points, targets, specs, activation, steps, learning_rate, seeds):
    """Final relative NTK drift per seed after full-batch squared-error training."""

    def one(k):
        net = network.init_network(linalg.derive_rng(seed, k), specs, activation)
        cfg = network.TrainConfig(learning_rate, steps, history_every=max(steps, 1) * 10 + 1, seed=k)
        _, drift = kernels.ntk_training_drift(net, (points, targets), cfg)
        return drift[-1][1]

    return parallel_map(one, range(seeds))


def pair_table(empirical, theory, pairs):
    rows = []
    for i, j in pairs:
        rows.append((i, j, float(empirical[i, j]), float(theory[i, j]),
                     abs(empirical[i, j] - theory[i, j]) / abs(theory[i, j])))
    return rows


# ---------------------------------------------------------------- curves


def curve_experiment(seed, width, depth, stable_ranks, spectral_norm, activation, seeds, n_points,
                     sigma_b=0.0, gamma_mode="inv_sqrt_fanin", radius=None, method="sphere",
                     keep_curves_for_seed=None):
    """Propagate a circle through random stable-rank nets.

    Returns ``(records, curves)``: one record per (stable rank, seed, layer)
    with measured length, mean curvature and empirical vs predicted squared
    pre-activation norm ``q``; ``curves[r]`` holds per-layer curves for
    ``keep_curves_for_seed``.
    """
    radius = math.sqrt(width) if radius is None else radius
    moments = kernels.ActivationMoments(activation)
    jobs = [(ri, k) for ri in range(len(stable_ranks)) for k in range(seeds)]

    def one(job):
        ri, k = job
        r = float(stable_ranks[ri])
        spec = SpectrumSpec(r, spectral_norm)
        init = network.StableRankInit(spec, sigma_b=sigma_b, method=method, full_rank="exact")
        specs = [network.LayerSpec(width, width, init, gamma_mode) for _ in range(depth)]
        rng = linalg.derive_rng(seed, ri, k)
        net = network.init_network(rng, specs, activation)
        basis = linalg.sample_haar_orthogonal(rng, width, 2).T
        circle = geometry.circle_curve(n_points, width, radius, basis)
        curves = geometry.propagate_curve(net, circle)
        geo_layers = [geometry.GeometryLayer(width, width, r, spectral_norm, sp.gamma, sigma_b) for sp in specs]
        x0 = circle.points[0]
        state = geometry.input_length_state(x0, x0, geo_layers[0])
        q_theory = [state.q11]
        for gl in geo_layers[1:]:
            state = geometry.propagate_length(state, gl, moments)
            q_theory.append(state.q11)
        rows = []
        for l, c in enumerate(curves):
            length, kappa = geometry.measure_curve(c)
            q_emp = float(np.mean(np.sum(c.points**2, axis=1)) / width)
            rows.append({"stable_rank": r, "seed": k, "layer": l + 1, "length": length,
                         "mean_curvature": float(np.mean(kappa)),
                         "q_empirical": q_emp, "q_theory": float(q_theory[l])})
        return rows, (curves if k == keep_curves_for_seed else None)

    out = parallel_map(one, jobs)
    records = [row for rows, _ in out for row in rows]
    curves = {float(stable_ranks[ri]): cs for (ri, k), (_, cs) in zip(jobs, out) if cs is not None}
    return records, curves


def mean_output_lengths(records, depth):
    by_r: Dict[float, List[float]] = {}
    for row in records:
        if row["layer"] == depth:
            by_r.setdefault(row["stable_rank"], []).append(row["length"])
    return {r: float(np.mean(v)) for r, v in sorted(by_r.items())}


# ---------------------------------------------------------------- toy training


@dataclass
class ToyRun:
    name: str
    loss: np.ndarray
    path_length: np.ndarray
    diagonals: np.ndarray
    final: np.ndarray


def _train_linear(w0, x, y, cfg):
    layer = network.Layer(np.array(w0, dtype=np.float64), None, 1.0)
    net = network.Mlp([layer], "identity")
    diags = []

    def callback(step, current):
        diags.append(np.diag(current.layers[0].weight).copy())

    trained, hist = network.train(net, (x, y), cfg, callback=callback)
    diags = np.vstack([np.diag(w0)[None, :]] + [d[None, :] for d in diags])
    return trained.layers[0].weight, hist, diags


def toy_training(x_diag, y_diag, w0_diag, learning_rate, steps):
    """Diagonal least squares with plain and stable-rank projected gradient descent.

    The projection target is the stable rank and spectral norm of the exact
    solution ``W* = X^{-1} Y``.
    """
    x = np.diag(np.asarray(x_diag, dtype=np.float64))
    y = np.diag(np.asarray(y_diag, dtype=np.float64))
    w_star = np.linalg.solve(x, y).T
    w0 = np.diag(np.asarray(w0_diag, dtype=np.float64))
    target = SpectrumSpec(linalg.stable_rank(w_star), linalg.spectral_norm(w_star))
    runs = {}
    for name, proj in (("unconstrained", None), ("projected", [target])):
        cfg = network.TrainConfig(learning_rate, steps, projection=proj, history_every=max(steps, 1) + 1)
        final, hist, diags = _train_linear(w0, x, y, cfg)
        runs[name] = ToyRun(name, hist.loss, hist.path_length, diags, final)
    straight = float(np.linalg.norm(w0 - w_star))
    summary = {
        "w_star_diag": [float(v) for v in np.diag(w_star)],
        "srank_w_star": target.stable_rank,
        "spectral_norm_w_star": target.spectral_norm,
        "straight_line": straight,
    }
    for name, run in runs.items():
        dist = np.max(np.abs(run.diagonals - np.diag(w_star)[None, :]), axis=1)
        hit = np.flatnonzero(dist <= 1e-6)
        summary[name] = {
            "path_length": float(run.path_length[-1]),
            "path_ratio": float(run.path_length[-1] / straight) if straight > 0 else float("nan"),
            "final_loss": float(run.loss[-1]),
            "loss_monotone": bool(np.all(np.diff(run.loss) <= 0.0)),
            "final_distance": float(np.max(np.abs(run.final - w_star))),
            "steps_to_1e-6": int(hit[0]) if hit.size else None,
        }
    summary["projected_not_shorter"] = summary["projected"]["path_length"] >= summary["unconstrained"]["path_length"]
    return summary, runs


# ---------------------------------------------------------------- noise fitting / regularisation


def accuracy(net, x, labels):
    out, _ = network.forward(net, x)
    return float(np.mean(np.argmax(out, axis=1) == labels))


def _two_layer(n_in, hidden, classes, first_init):
    return [network.LayerSpec(n_in, hidden, first_init),
            network.LayerSpec(hidden, classes, network.GaussianInit(1.0, 0.0))]


def noise_fitting(seed, dataset, hidden, srank_targets, shuffle_fractions, seeds, epochs, batch_size,
                  learning_rate, spectral_norm=None, method="cube", activation="relu"):
    """Train accuracy on clean or label-shuffled data for stable-rank constrained hidden layers.

    The hidden layer is initialised and projected (after every step) at each
    target stable rank with a common spectral norm; the output layer is
    Gaussian and unconstrained. Initialisations are shared across shuffle
    fractions so that the comparison is paired.
    """
    x, labels = dataset.images, dataset.labels
    n, n_in = x.shape
    classes = int(labels.max()) + 1
    s = spectral_norm if spectral_norm is not None else math.sqrt(hidden) + math.sqrt(n_in)
    steps = epochs * math.ceil(n / batch_size)
    jobs = [(ri, fi, k) for ri in range(len(srank_targets)) for fi in range(len(shuffle_fractions))
            for k in range(seeds)]

    def one(job):
        ri, fi, k = job
        spec = SpectrumSpec(float(srank_targets[ri]), s)
        y, _, _ = data_mod.shuffle_labels(labels, shuffle_fractions[fi], linalg.derive_rng(seed, 1, fi, k))
        init = network.StableRankInit(spec, method=method)
        net = network.init_network(linalg.derive_rng(seed, 2, ri, k), _two_layer(n_in, hidden, classes, init),
                                   activation)
        cfg = network.TrainConfig(learning_rate, steps, batch_size, [spec, None], "softmax_cross_entropy",
                                  seed=k, history_every=steps + 1)
        trained, hist = network.train(net, (x, y), cfg)
        return {"srank": spec.stable_rank, "shuffle_fraction": float(shuffle_fractions[fi]), "seed": k,
                "train_accuracy": accuracy(trained, x, y), "train_loss": float(hist.loss[-1])}

    return parallel_map(one, jobs)


def summarize_noise(runs):
    table = {}
    for row in runs:
        table.setdefault(row["srank"], {}).setdefault(row["shuffle_fraction"], []).append(row["train_accuracy"])
    out = []
    for r in sorted(table):
        fr = table[r]
        clean = np.array(fr.get(0.0, [np.nan]))
        noisy_key = max(fr)
        noisy = np.array(fr[noisy_key])
        out.append({"srank": r, "clean_acc": float(clean.mean()), "clean_std": float(clean.std()),
                    "shuffled_acc": float(noisy.mean()), "shuffled_std": float(noisy.std()),
                    "shuffle_fraction": noisy_key})
    return out


def regularization(seed, train, test, hidden, models, epochs, batch_size, learning_rate, l1_grid, l2_grid,
                   srank_grid, activation="relu", method="cube"):
    """Mean test loss and accuracy per (scheme, hyperparameter) over ``models`` seeds.

    ``l1``/``l2``: Gaussian init with weight penalties; ``srank_init``:
    stable-rank initialised hidden layer (spectral norm of the Gaussian
    baseline), trained without penalties or projection.
    """
    x, labels = train.images, train.labels
    n, n_in = x.shape
    classes = int(max(labels.max(), test.labels.max())) + 1
    steps = epochs * math.ceil(n / batch_size)
    s = math.sqrt(hidden) + math.sqrt(n_in)
    jobs = ([("l1", float(v), k) for v in l1_grid for k in range(models)]
            + [("l2", float(v), k) for v in l2_grid for k in range(models)]
            + [("srank_init", float(v), k) for v in srank_grid for k in range(models)])

    def one(job):
        scheme, value, k = job
        if scheme == "srank_init":
            init = network.StableRankInit(SpectrumSpec(value, s), method=method)
        else:
            init = network.GaussianInit(1.0, 0.0)
        # the same init seed for every hyperparameter keeps comparisons paired
        net = network.init_network(linalg.derive_rng(seed, 3, k, 0 if scheme != "srank_init" else 1),
                                   _two_layer(n_in, hidden, classes, init), activation)
        cfg = network.TrainConfig(learning_rate, steps, batch_size, loss="softmax_cross_entropy", seed=k,
                                  l1=value if scheme == "l1" else 0.0, l2=value if scheme == "l2" else 0.0,
                                  history_every=steps + 1)
        trained, _ = network.train(net, (x, labels), cfg)
        test_loss = network.loss_value(trained, test.images, test.labels, "softmax_cross_entropy")
        return scheme, value, test_loss, accuracy(trained, test.images, test.labels)

    results = parallel_map(one, jobs)
    grouped = {}
    for scheme, value, loss, acc in results:
        grouped.setdefault((scheme, value), []).append((loss, acc))
    rows = []
    for (scheme, value), vals in sorted(grouped.items()):
        arr = np.array(vals)
        rows.append({"scheme": scheme, "hyperparameter": value, "mean_test_loss": float(arr[:, 0].mean()),
                     "mean_accuracy": float(arr[:, 1].mean()), "std": float(arr[:, 1].std()),
                     "models": len(vals)})
    return rows
