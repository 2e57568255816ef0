"""Finite-width fully connected networks: initialisation, forward pass, gradients and SGD.

A network maps ``x`` through ``pre^l = gamma_l * a^{l-1} @ W_l.T + b_l`` and
``a^l = phi(pre^l)``; the last pre-activation is the output. Batches are rows.
"""

import copy
import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import linalg, sampler
from .activations import get_activation
from .errors import ConfigError, DataError, DivergenceError, PreconditionError

CHECKPOINT_MAGIC = b"SRNETCKP"
HISTORY_HEADER = ("step", "loss", "layer", "srank", "spectral_norm", "path_length")
LOSSES = ("squared_error", "softmax_cross_entropy")
GAMMA_MODES = ("one", "inv_sqrt_fanin")


@dataclass(frozen=True)
class GaussianInit:
    """I.i.d. ``N(0, sigma_w^2 / n_in)`` weights."""

    sigma_w: float = 1.0
    sigma_b: float = 0.0

    def __post_init__(self):
        if not self.sigma_w > 0:
            raise ConfigError(f"sigma_w must be positive, got {self.sigma_w}")
        if not self.sigma_b >= 0:
            raise ConfigError(f"sigma_b must be non-negative, got {self.sigma_b}")


@dataclass(frozen=True)
class StableRankInit:
    """Weights from :func:`sampler.assemble_weight`.

    ``sigma_b=None`` picks ``sigma_b^2 = 0.01 * s^2 r / (n_in * n_out)``.
    """

    spec: sampler.SpectrumSpec
    sigma_b: Optional[float] = None
    method: str = "sphere"
    full_rank: str = "error"

    def __post_init__(self):
        if self.sigma_b is not None and not self.sigma_b >= 0:
            raise ConfigError(f"sigma_b must be non-negative, got {self.sigma_b}")
        if self.method not in sampler.SPECTRUM_SAMPLERS:
            raise ConfigError(f"unknown spectrum method {self.method!r}")

    def bias_std(self, n_in, n_out):
        if self.sigma_b is not None:
            return float(self.sigma_b)
        return math.sqrt(0.01 * self.spec.frobenius_sq / (n_in * n_out))


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    init: Union[GaussianInit, StableRankInit] = field(default_factory=GaussianInit)
    gamma_mode: str = "inv_sqrt_fanin"
    bias: bool = True

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError(f"layer dimensions must be positive, got {self.n_in}->{self.n_out}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigError(f"gamma_mode must be one of {GAMMA_MODES}, got {self.gamma_mode!r}")

    @property
    def gamma(self):
        return 1.0 if self.gamma_mode == "one" else 1.0 / math.sqrt(self.n_in)


@dataclass
class Layer:
    weight: np.ndarray
    bias: Optional[np.ndarray]
    gamma: float

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: List[Layer]
    activation: str = "identity"

    def __post_init__(self):
        get_activation(self.activation)
        if not self.layers:
            raise PreconditionError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise PreconditionError(
                    f"layer dimensions do not chain: {prev.n_out} outputs feed {nxt.n_in} inputs"
                )

    @property
    def depth(self):
        return len(self.layers)

    @property
    def widths(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Flat list of trainable arrays (weights and present biases), in layer order."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out


@dataclass
class ForwardTrace:
    pre_activations: List[np.ndarray]
    post_activations: List[np.ndarray]


@dataclass
class Gradient:
    weight: np.ndarray
    bias: Optional[np.ndarray]


@dataclass
class TrainConfig:
    """SGD settings. ``batch_size=None`` means full batch.

    ``projection`` is ``None`` or one ``SpectrumSpec`` (or ``None``) per layer.
    ``history_every`` controls how often per-layer spectra are recorded; the
    loss and path length are recorded every step.
    """

    learning_rate: float
    steps: int
    batch_size: Optional[int] = None
    projection: Optional[Sequence[Optional[sampler.SpectrumSpec]]] = None
    loss: str = "squared_error"
    seed: int = 0
    l1: float = 0.0
    l2: float = 0.0
    history_every: int = 1

    def __post_init__(self):
        # lr = 0 is accepted so that a no-op run can be expressed
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.l1 < 0 or self.l2 < 0:
            raise ConfigError("penalty coefficients must be non-negative")
        if self.history_every < 1:
            raise ConfigError("history_every must be >= 1")


@dataclass
class TrainHistory:
    """Per-step records. ``srank`` and ``spectral_norm`` are ``(steps+1, depth)``, NaN where not tracked."""

    loss: np.ndarray
    srank: np.ndarray
    spectral_norm: np.ndarray
    path_length: np.ndarray

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for t in range(self.loss.size):
            for layer in range(self.srank.shape[1]):
                if np.isnan(self.srank[t, layer]):
                    continue
                w.writerow([t, repr(float(self.loss[t])), layer + 1,
                            repr(float(self.srank[t, layer])),
                            repr(float(self.spectral_norm[t, layer])),
                            repr(float(self.path_length[t]))])
        return buf.getvalue()


def init_network(rng, specs, activation="identity"):
    """Draw weights and biases for every layer spec, in order."""
    specs = list(specs)
    for prev, nxt in zip(specs, specs[1:]):
        if prev.n_out != nxt.n_in:
            raise PreconditionError(
                f"layer dimensions do not chain: {prev.n_out} outputs feed {nxt.n_in} inputs"
            )
    layers = []
    for spec in specs:
        init = spec.init
        if isinstance(init, GaussianInit):
            w = linalg.sample_gaussian_matrix(rng, spec.n_out, spec.n_in, init.sigma_w / math.sqrt(spec.n_in))
            b_std = init.sigma_b
        elif isinstance(init, StableRankInit):
            w = sampler.assemble_weight(rng, init.spec, spec.n_out, spec.n_in, init.method,
                                        full_rank=init.full_rank)
            b_std = init.bias_std(spec.n_in, spec.n_out)
        else:
            raise ConfigError(f"unknown init {init!r}")
        if spec.bias:
            b = rng.standard_normal(spec.n_out) * b_std
        else:
            b = None
        layers.append(Layer(w, b, spec.gamma))
    return Mlp(layers, activation)


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise PreconditionError(f"expected a batch with {n_in} columns, got shape {x.shape}")
    return x


def forward(net, x):
    """Return ``(output, trace)`` for a batch ``x`` of shape ``(batch, n_0)``."""
    phi = get_activation(net.activation)
    a = _as_batch(x, net.layers[0].n_in)
    pre_list, post_list = [], []
    last = net.depth - 1
    for i, layer in enumerate(net.layers):
        pre = layer.gamma * (a @ layer.weight.T)
        if layer.bias is not None:
            pre = pre + layer.bias
        a = pre if i == last else phi(pre)
        pre_list.append(pre)
        post_list.append(a)
    return a, ForwardTrace(pre_list, post_list)


def _one_hot(y, k):
    y = np.asarray(y)
    if y.ndim == 1 and np.issubdtype(y.dtype, np.integer):
        out = np.zeros((y.size, k))
        out[np.arange(y.size), y] = 1.0
        return out
    return np.asarray(y, dtype=np.float64)


def _log_softmax(z):
    z = z - np.max(z, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def loss_and_output_grad(output, y, loss):
    """Mean loss over the batch and its gradient w.r.t. the output."""
    n = output.shape[0]
    y = _one_hot(y, output.shape[1])
    if y.shape != output.shape:
        raise PreconditionError(f"targets of shape {y.shape} do not match outputs {output.shape}")
    if loss == "squared_error":
        r = output - y
        return float(np.sum(r * r) / n), 2.0 * r / n
    if loss == "softmax_cross_entropy":
        logp = _log_softmax(output)
        return float(-np.sum(y * logp) / n), (np.exp(logp) * np.sum(y, axis=1, keepdims=True) - y) / n
    raise ConfigError(f"unknown loss {loss!r}")


def penalty(net, l1=0.0, l2=0.0):
    total = 0.0
    for layer in net.layers:
        if l1:
            total += l1 * float(np.sum(np.abs(layer.weight)))
        if l2:
            total += l2 * float(np.sum(layer.weight**2))
    return total


def loss_value(net, x, y, loss="squared_error", l1=0.0, l2=0.0):
    out, _ = forward(net, x)
    value, _ = loss_and_output_grad(out, y, loss)
    return value + penalty(net, l1, l2)


def gradient(net, x, y, loss="squared_error", l1=0.0, l2=0.0):
    """Reverse-mode gradients of the mean batch loss plus weight penalties.

    Returns ``(loss_value, [Gradient per layer])``.
    """
    phi = get_activation(net.activation)
    x = _as_batch(x, net.layers[0].n_in)
    out, trace = forward(net, x)
    value, delta = loss_and_output_grad(out, y, loss)
    grads = [None] * net.depth
    for i in range(net.depth - 1, -1, -1):
        layer = net.layers[i]
        a_prev = x if i == 0 else trace.post_activations[i - 1]
        gw = layer.gamma * (delta.T @ a_prev)
        if l1:
            gw = gw + l1 * np.sign(layer.weight)
        if l2:
            gw = gw + 2.0 * l2 * layer.weight
        gb = delta.sum(axis=0) if layer.bias is not None else None
        grads[i] = Gradient(gw, gb)
        if i > 0:
            delta = (delta @ (layer.gamma * layer.weight)) * phi.d1(trace.pre_activations[i - 1])
    return value + penalty(net, l1, l2), grads


def _layer_spectra(net):
    s = [linalg.singular_values(layer.weight) for layer in net.layers]
    return [float(np.sum((v / v[0]) ** 2)) if v[0] > 0 else float("nan") for v in s], [float(v[0]) for v in s]


def train(net, data, cfg, callback=None):
    """Plain (optionally projected) SGD on ``data = (x, y)``.

    Returns ``(trained_net, history)``; the input net is not modified. Row ``t``
    of the history describes the parameters after ``t`` steps: the full-data
    objective, layer spectra and cumulative parameter path length.
    ``callback(step, net)`` is invoked after every step.
    """
    x, y = data
    x = _as_batch(x, net.layers[0].n_in)
    n = x.shape[0]
    y = np.asarray(y)
    if y.shape[0] != n:
        raise PreconditionError(f"{n} inputs but {y.shape[0]} targets")
    net = net.copy()
    if cfg.projection is not None and len(cfg.projection) != net.depth:
        raise ConfigError(f"projection needs one entry per layer ({net.depth}), got {len(cfg.projection)}")
    rng = linalg.make_rng(cfg.seed)
    batch = n if cfg.batch_size is None else min(cfg.batch_size, n)

    T = cfg.steps
    hist = TrainHistory(np.empty(T + 1), np.full((T + 1, net.depth), np.nan),
                        np.full((T + 1, net.depth), np.nan), np.zeros(T + 1))

    def record(t):
        hist.loss[t] = loss_value(net, x, y, cfg.loss, cfg.l1, cfg.l2)
        if not math.isfinite(hist.loss[t]):
            raise DivergenceError(t)
        if t % cfg.history_every == 0 or t == T:
            sr, sn = _layer_spectra(net)
            hist.srank[t] = sr
            hist.spectral_norm[t] = sn

    record(0)
    order = np.arange(n)
    cursor = n
    path = 0.0
    for t in range(1, T + 1):
        if batch == n:
            idx = order
        else:
            if cursor + batch > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + batch]
            cursor += batch
        _, grads = gradient(net, x[idx], y[idx], cfg.loss, cfg.l1, cfg.l2)
        moved = 0.0
        for i, (layer, g) in enumerate(zip(net.layers, grads)):
            new_w = layer.weight - cfg.learning_rate * g.weight
            if cfg.projection is not None and cfg.projection[i] is not None:
                new_w = sampler.project_stable_rank(new_w, cfg.projection[i])
            moved += float(np.sum((new_w - layer.weight) ** 2))
            layer.weight = new_w
            if layer.bias is not None:
                step = cfg.learning_rate * g.bias
                moved += float(np.sum(step * step))
                layer.bias = layer.bias - step
        path += math.sqrt(moved)
        hist.path_length[t] = path
        record(t)
        if callback is not None:
            callback(t, net)
    return net, hist


def capacity_proxy(net):
    """``prod_l ||W_l||_2^2 * sum_l srank(W_l)``."""
    prod = 1.0
    total = 0.0
    for layer in net.layers:
        prod *= linalg.spectral_norm(layer.weight) ** 2
        total += linalg.stable_rank(layer.weight)
    return prod * total


def gaussian_srank_ratio(n_out, n_in):
    """Limit of ``srank(W) / n_out`` for an i.i.d. Gaussian ``n_out x n_in`` matrix, ``n_in <= n_out``."""
    if not 1 <= n_in <= n_out:
        raise PreconditionError(f"need 1 <= n_in <= n_out, got n_in={n_in}, n_out={n_out}")
    alpha = n_in / n_out
    return alpha / (1.0 + math.sqrt(alpha)) ** 2


def save_checkpoint(path, net):
    """Magic, u64 header length, JSON header, then weight (and bias) matrix blobs per layer."""
    header = {
        "activation": net.activation,
        "layers": [
            {"n_in": layer.n_in, "n_out": layer.n_out, "gamma": layer.gamma,
             "bias": layer.bias is not None}
            for layer in net.layers
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for layer in net.layers:
            linalg.write_matrix_blob(f, layer.weight)
            if layer.bias is not None:
                linalg.write_matrix_blob(f, layer.bias[None, :])


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        size_raw = f.read(8)
        if len(size_raw) != 8:
            raise DataError("truncated checkpoint header")
        (size,) = struct.unpack("<Q", size_raw)
        raw = f.read(size)
        if len(raw) != size:
            raise DataError("truncated checkpoint header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt checkpoint header: {exc}") from exc
        layers = []
        for meta in header["layers"]:
            w = linalg.read_matrix_blob(f)
            if w.shape != (meta["n_out"], meta["n_in"]):
                raise DataError(f"weight shape {w.shape} does not match header {meta}")
            b = linalg.read_matrix_blob(f)[0] if meta["bias"] else None
            layers.append(Layer(w, b, float(meta["gamma"])))
    return Mlp(layers, header["activation"])
