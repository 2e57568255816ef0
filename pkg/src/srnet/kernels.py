"""Infinite-width limit kernels and their finite-width counterparts.

Two normalisations of the depth recursions are offered:

``literal``
    ``Sigma^1 = s^2 r / (N_0 N_1) <x, x'> + sigma_b^2``,
    ``Sigma^l = s^2 r / (N_{l-1} N_l) E[phi phi] + sigma_b^2``,
    ``Theta^1 = gamma_1^2 <x, x'> + c``,
    ``Theta^l = gamma_l^2 (r s^2 / N_l) Theta^{l-1} Sigma_dot^l + Sigma^l``.
``network``
    The exact large-width limit of :func:`srnet.network.forward` with explicit
    ``gamma``: ``Sigma^1 = gamma_1^2 s^2 r/(N_0 N_1) <x, x'> + sigma_b^2``,
    ``Sigma^l = gamma_l^2 s^2 r / N_l E[phi phi] + sigma_b^2``,
    ``Theta^l = gamma_l^2 (r s^2/N_l) Theta^{l-1} Sigma_dot^l + gamma_l^2 N_{l-1} E[phi phi] + c``.

Both agree when ``gamma_1 = 1``, ``gamma_l = 1/sqrt(N_{l-1})``,
``s_l^2 r_l = N_l N_{l-1}`` for ``l >= 2`` and ``c = sigma_b^2``.
"""

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .activations import get_activation
from .errors import PreconditionError, PSDViolation
from .network import forward

CONVENTIONS = ("literal", "network")
PSD_ERROR_TOL = 1e-6


@dataclass(frozen=True)
class LayerGeometry:
    """Width ``N_l``, stable rank, spectral norm, ``gamma`` and bias std of one layer."""

    width: int
    stable_rank: float
    spectral_norm: float
    gamma: float = 1.0
    sigma_b: float = 0.0

    @property
    def srank_s2(self):
        return self.stable_rank * self.spectral_norm**2


@dataclass
class KernelState:
    inputs: np.ndarray
    sigma: np.ndarray
    theta: Optional[np.ndarray]
    layer_index: int


@dataclass(frozen=True)
class ActivationMoments:
    """Gauss-Hermite settings for Gaussian expectations of an activation."""

    activation: str
    order: int = 40
    closed_form: bool = True

    def __post_init__(self):
        get_activation(self.activation)
        if self.order < 8:
            raise PreconditionError(f"quadrature order must be >= 8, got {self.order}")

    @property
    def phi(self):
        return get_activation(self.activation)


def _nodes(order):
    x, w = np.polynomial.hermite.hermgauss(order)
    return math.sqrt(2.0) * x, w / math.sqrt(math.pi)


def _resolve(g, moments):
    if callable(g):
        return g
    act = moments.phi
    if g == "phi":
        return act.fn
    if g == "dphi":
        return act.d1
    if g == "ddphi":
        if act.d2 is None:
            raise PreconditionError(f"{act.name} has no second derivative")
        return act.d2
    raise PreconditionError(f"unknown integrand {g!r}")


def _bivariate_params(q11, q22, q12, layer=None):
    """Validate and repair ``[[q11, q12], [q12, q22]]``; returns ``(q11, q22, c)`` arrays."""
    q11, q22, q12 = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (q11, q22, q12))
    q11, q22, q12 = np.broadcast_arrays(q11, q22, q12)
    scale = np.maximum(np.maximum(np.abs(q11), np.abs(q22)), np.finfo(np.float64).tiny)
    lam_min = 0.5 * (q11 + q22 - np.sqrt((q11 - q22) ** 2 + 4.0 * q12 * q12))
    bad = lam_min < -PSD_ERROR_TOL * scale
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise PSDViolation(
            f"covariance [[{q11[k]}, {q12[k]}], [{q12[k]}, {q22[k]}]] is not positive semi-definite",
            layer=layer,
        )
    q11 = np.maximum(q11, 0.0)
    q22 = np.maximum(q22, 0.0)
    denom = np.sqrt(q11 * q22)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(denom > 0, q12 / denom, 0.0)
    return q11, q22, np.clip(c, -1.0, 1.0)


def _relu_closed_form(kind, q11, q22, c):
    theta = np.arccos(c)
    if kind == "phi":
        return np.sqrt(q11 * q22) / (2.0 * math.pi) * (np.sin(theta) + (math.pi - theta) * c)
    return (math.pi - theta) / (2.0 * math.pi)


def gaussian_pair_expectation(q11, q22, q12, g, moments, g2=None, layer=None):
    """``E[g(u1) g2(u2)]`` for centred Gaussian ``(u1, u2)`` with covariance ``[[q11, q12], [q12, q22]]``.

    Parameters
    ----------
    q11, q22, q12 : float or array_like
        Broadcastable covariance entries; the result has their broadcast shape.
    g, g2 : {"phi", "dphi", "ddphi"} or callable
        Integrands; ``g2`` defaults to ``g``.
    moments : ActivationMoments
        Activation and tensorised Gauss-Hermite order.

    Notes
    -----
    Uses ``u1 = sqrt(q11) z1`` and ``u2 = sqrt(q22) (c z1 + sqrt(1 - c^2) z2)``.
    For ReLU, ``phi``/``dphi`` pairs use the arc-cosine closed forms because
    quadrature converges slowly across the kink.
    """
    shape = np.broadcast(np.asarray(q11), np.asarray(q22), np.asarray(q12)).shape
    a, b, c = _bivariate_params(q11, q22, q12, layer)
    g2 = g if g2 is None else g2
    if (moments.closed_form and moments.activation == "relu" and isinstance(g, str)
            and g == g2 and g in ("phi", "dphi")):
        out = _relu_closed_form(g, a, b, c)
        return out.reshape(shape) if shape else float(out[0])
    f1 = _resolve(g, moments)
    f2 = _resolve(g2, moments)
    z, w = _nodes(moments.order)
    z1 = np.repeat(z, z.size)
    z2 = np.tile(z, z.size)
    ww = np.repeat(w, w.size) * np.tile(w, w.size)
    s = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    u1 = np.sqrt(a)[:, None] * z1[None, :]
    u2 = np.sqrt(b)[:, None] * (c[:, None] * z1[None, :] + s[:, None] * z2[None, :])
    out = (f1(u1) * f2(u2)) @ ww
    return out.reshape(shape) if shape else float(out[0])


def gaussian_expectation(q, g, moments, order=None):
    """One-dimensional ``E[g(sqrt(q) z)]``, ``z ~ N(0, 1)``."""
    f = _resolve(g, moments)
    z, w = _nodes(order or max(moments.order, 80))
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0):
        raise PreconditionError("variance must be non-negative")
    out = f(np.sqrt(q)[..., None] * z) @ w
    return float(out) if out.ndim == 0 else out


def _pairwise(sigma, g, moments, layer):
    d = np.diag(sigma)
    n = d.size
    iu = np.triu_indices(n)
    vals = gaussian_pair_expectation(d[iu[0]], d[iu[1]], sigma[iu], g, moments, layer=layer)
    out = np.empty((n, n))
    out[iu] = vals
    out[iu[1], iu[0]] = vals
    return out


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise PreconditionError(f"convention must be one of {CONVENTIONS}, got {convention!r}")


def _symmetrize(a):
    return 0.5 * (a + a.T)


def kernel_recursion(points, geometry, moments, convention="literal", bias_constant=1.0,
                     with_ntk=True):
    """All per-layer kernel states ``[Sigma^l, Theta^l]`` for ``l = 1..L``."""
    _check_convention(convention)
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    geometry = list(geometry)
    if not geometry:
        raise PreconditionError("geometry must list at least one layer")
    n0 = x.shape[1]
    gram = _symmetrize(x @ x.T)
    states = []
    first = geometry[0]
    factor = first.srank_s2 / (n0 * first.width)
    if convention == "network":
        factor *= first.gamma**2
    sigma = factor * gram + first.sigma_b**2
    theta = first.gamma**2 * gram + bias_constant if with_ntk else None
    states.append(KernelState(x, sigma, theta, 1))
    prev_width = first.width
    for l, geo in enumerate(geometry[1:], start=2):
        e_phi = _pairwise(sigma, "phi", moments, layer=l)
        if convention == "literal":
            sigma_new = geo.srank_s2 / (prev_width * geo.width) * e_phi + geo.sigma_b**2
        else:
            sigma_new = geo.gamma**2 * geo.srank_s2 / geo.width * e_phi + geo.sigma_b**2
        if with_ntk:
            e_dphi = _pairwise(sigma, "dphi", moments, layer=l)
            carry = geo.gamma**2 * geo.srank_s2 / geo.width * theta * e_dphi
            if convention == "literal":
                theta = carry + sigma_new
            else:
                theta = carry + geo.gamma**2 * prev_width * e_phi + bias_constant
        sigma = sigma_new
        states.append(KernelState(x, sigma, theta, l))
        prev_width = geo.width
    return states


def gp_covariance_recursion(points, geometry, moments, convention="literal"):
    """Per-layer GP covariances ``Sigma^l`` as :class:`KernelState` (``theta`` is ``None``)."""
    return kernel_recursion(points, geometry, moments, convention, with_ntk=False)


def ntk_recursion(points, geometry, moments, convention="literal", bias_constant=1.0):
    """Limiting NTK at the last layer; the state also carries ``Sigma^L``."""
    return kernel_recursion(points, geometry, moments, convention, bias_constant)[-1]


def _output_jacobians(net, x):
    """``J[l]`` has shape ``(n, N_L, N_l)``: derivative of the outputs w.r.t. the layer-``l`` pre-activation."""
    phi = get_activation(net.activation)
    _, trace = forward(net, x)
    n = x.shape[0]
    n_out = net.layers[-1].n_out
    jac = [None] * net.depth
    j = np.broadcast_to(np.eye(n_out), (n, n_out, n_out)).copy()
    jac[-1] = j
    for l in range(net.depth - 1, 0, -1):
        layer = net.layers[l]
        j = np.einsum("nkp,pq->nkq", j, layer.gamma * layer.weight)
        j *= phi.d1(trace.pre_activations[l - 1])[:, None, :]
        jac[l - 1] = j
    return jac, trace


def empirical_ntk_blocks(net, points, train_bias=True):
    """Empirical NTK as an ``(n, n, N_L, N_L)`` array ``[i, j, k, k']``.

    Weights of every layer are trained; biases contribute when
    ``train_bias`` is true and the layer has one.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    jac, trace = _output_jacobians(net, x)
    n, n_out = x.shape[0], net.layers[-1].n_out
    out = np.zeros((n, n, n_out, n_out))
    for l, layer in enumerate(net.layers):
        a_prev = x if l == 0 else trace.post_activations[l - 1]
        factor = layer.gamma**2 * (a_prev @ a_prev.T)
        if train_bias and layer.bias is not None:
            factor = factor + 1.0
        jj = np.einsum("ikp,jmp->ijkm", jac[l], jac[l])
        out += jj * factor[:, :, None, None]
    return out


def empirical_ntk(net, points, train_bias=True):
    """Full ``n N_L x n N_L`` NTK, indexed by ``i * N_L + k``."""
    blocks = empirical_ntk_blocks(net, points, train_bias)
    n, _, k, _ = blocks.shape
    full = blocks.transpose(0, 2, 1, 3).reshape(n * k, n * k)
    return _symmetrize(full)


def ntk_output_average(blocks):
    """Average of the diagonal output blocks, the estimate of the ``Theta_inf`` factor."""
    return np.einsum("ijkk->ij", blocks) / blocks.shape[2]


def off_diagonal_ratio(blocks):
    """Frobenius mass of the ``k != k'`` entries relative to the ``k == k'`` entries."""
    k = blocks.shape[2]
    mask = ~np.eye(k, dtype=bool)
    off = np.sum(blocks[:, :, mask] ** 2)
    diag = np.sum(np.einsum("ijkk->ijk", blocks) ** 2)
    return float(math.sqrt(off / diag))


@dataclass
class NtkRegressionResult:
    predictions: np.ndarray
    condition_number: float
    warnings: List[str] = field(default_factory=list)


def ntk_regression(theta_train, theta_cross, y_train, ridge=1e-8, max_condition=1e12):
    """Kernel ridge prediction ``theta_cross (theta_train + ridge I)^{-1} y_train``."""
    kt = np.asarray(theta_train, dtype=np.float64)
    kc = np.atleast_2d(np.asarray(theta_cross, dtype=np.float64))
    y = np.asarray(y_train, dtype=np.float64)
    a = kt + ridge * np.eye(kt.shape[0])
    cond = float(np.linalg.cond(a))
    notes = []
    if not math.isfinite(cond) or cond > max_condition:
        notes.append(f"ill-conditioned kernel system (condition number {cond:.3e})")
    try:
        coef = np.linalg.solve(a, y)
    except np.linalg.LinAlgError:
        notes.append("singular kernel system; used least squares")
        coef = np.linalg.lstsq(a, y, rcond=None)[0]
    return NtkRegressionResult(kc @ coef, cond, notes)


def ntk_eigenspectrum(theta):
    """Eigenvalues of a symmetric kernel (or the ``theta`` of a :class:`KernelState`), non-increasing."""
    if isinstance(theta, KernelState):
        theta = theta.theta
    t = np.asarray(theta, dtype=np.float64)
    if not np.allclose(t, t.T, rtol=1e-10, atol=1e-12):
        raise PreconditionError("kernel matrix must be symmetric")
    return np.linalg.eigvalsh(_symmetrize(t))[::-1]


def ntk_training_drift(net, data, cfg, checkpoints=None, points=None, train_bias=True):
    """Relative Frobenius drift ``||Theta_t - Theta_0|| / ||Theta_0||`` of the empirical NTK during training.

    Returns ``(trained_net, [(step, drift), ...])`` with step 0 first.
    ``points`` defaults to the training inputs; ``checkpoints`` defaults to the
    final step only.
    """
    from .network import train

    x = data[0] if points is None else points
    theta0 = empirical_ntk(net, x, train_bias)
    norm0 = np.linalg.norm(theta0)
    marks = {cfg.steps} if checkpoints is None else set(checkpoints)
    drift = [(0, 0.0)]

    def callback(step, current):
        if step in marks:
            d = np.linalg.norm(empirical_ntk(current, x, train_bias) - theta0) / norm0
            drift.append((step, float(d)))

    trained, _ = train(net, data, cfg, callback=callback)
    return trained, drift


def trace_records(states, pairs=None):
    """Flat records ``{layer, i, j, sigma, theta}`` for JSON export, ``i <= j``."""
    records = []
    for st in states:
        n = st.sigma.shape[0]
        sel = pairs if pairs is not None else [(i, j) for i in range(n) for j in range(i, n)]
        for i, j in sel:
            records.append({
                "layer": st.layer_index,
                "i": int(i),
                "j": int(j),
                "sigma": float(st.sigma[i, j]),
                "theta": None if st.theta is None else float(st.theta[i, j]),
            })
    return records


def write_trace_json(path, states, pairs=None):
    with open(path, "w") as f:
        json.dump(trace_records(states, pairs), f, indent=1, sort_keys=True)
        f.write("\n")
