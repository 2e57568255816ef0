"""Length, correlation and curvature propagation through random layers, plus discrete curve measurement."""

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import FixedPointError, NumericalFailure, PreconditionError
from .kernels import gaussian_expectation, gaussian_pair_expectation
from .network import forward

MIN_CURVE_POINTS = 16


@dataclass(frozen=True)
class LengthState:
    q11: float
    q22: float
    q12: float

    def __post_init__(self):
        if self.q11 < 0 or self.q22 < 0:
            raise PreconditionError("squared lengths must be non-negative")
        if abs(self.c12) > 1.0 + 1e-9:
            raise PreconditionError(f"correlation {self.c12} outside [-1, 1]")

    @property
    def c12(self):
        d = math.sqrt(self.q11 * self.q22)
        return self.q12 / d if d > 0 else 0.0


@dataclass(frozen=True)
class GeometryLayer:
    """One layer ``N_{l-1} -> N_l`` with stable rank ``r``, spectral norm ``s``, ``gamma`` and bias std."""

    n_in: int
    n_out: int
    stable_rank: float
    spectral_norm: float
    gamma: float = 1.0
    sigma_b: float = 0.0

    @property
    def length_factor(self):
        """``gamma^2 r s^2 / N_l``, the weight-variance multiplier of a layer fed by ``N_{l-1}`` units."""
        return self.gamma**2 * self.stable_rank * self.spectral_norm**2 / self.n_out

    def chi_prefactor(self, convention="literal"):
        rs2 = self.stable_rank * self.spectral_norm**2
        if convention == "literal":
            return rs2 / (self.n_out * self.n_in)
        if convention == "network":
            return self.gamma**2 * rs2 / self.n_out
        raise PreconditionError(f"unknown convention {convention!r}")


@dataclass(frozen=True)
class CurveGeometry:
    g: float
    kappa_sq: float
    q_star: float

    def __post_init__(self):
        if not self.g > 0:
            raise PreconditionError(f"metric element must be positive, got {self.g}")
        if not self.kappa_sq >= 0:
            raise PreconditionError(f"squared curvature must be non-negative, got {self.kappa_sq}")


@dataclass
class DiscreteCurve:
    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))


@dataclass(frozen=True)
class FixedPoint:
    q_star: float
    iterations: int
    marginal: bool


def input_length_state(x1, x2, layer):
    """First-layer pre-activation state from raw inputs (no activation on the input)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    f = layer.gamma**2 * layer.stable_rank * layer.spectral_norm**2 / (layer.n_in * layer.n_out)
    b = layer.sigma_b**2
    return LengthState(f * float(x1 @ x1) + b, f * float(x2 @ x2) + b, f * float(x1 @ x2) + b)


def propagate_length(state, layer, moments):
    """One step ``q -> gamma^2 (r s^2 / N_l) E[phi(u1) phi(u2)] + sigma_b^2`` for the three entries."""
    f = layer.length_factor
    b = layer.sigma_b**2
    e = gaussian_pair_expectation(
        np.array([state.q11, state.q22, state.q11]),
        np.array([state.q11, state.q22, state.q22]),
        np.array([state.q11, state.q22, state.q12]),
        "phi", moments,
    )
    return LengthState(f * e[0] + b, f * e[1] + b, f * e[2] + b)


def length_map(q, layer, moments):
    """Diagonal map ``q -> gamma^2 (r s^2/N_l) E[phi(sqrt(q) z)^2] + sigma_b^2``."""
    phi = moments.phi
    return layer.length_factor * gaussian_expectation(q, lambda u: phi(u) ** 2, moments) + layer.sigma_b**2


def fixed_point_q(layer, moments, tol=1e-10, q0=1.0, beta=0.5, max_iter=10_000):
    """Solve ``q = length_map(q)`` by damped iteration ``q <- (1 - beta) q + beta length_map(q)``."""
    if moments.activation == "identity" and layer.sigma_b == 0 and abs(layer.length_factor - 1.0) <= 1e-15:
        return FixedPoint(float(q0), 0, True)
    q = float(q0)
    for it in range(1, max_iter + 1):
        fq = float(length_map(q, layer, moments))
        if not math.isfinite(fq):
            raise FixedPointError(q, it)
        if abs(fq - q) <= tol:
            return FixedPoint(q, it, False)
        q = (1.0 - beta) * q + beta * fq
    raise FixedPointError(q, max_iter)


def curvature_chis(q_star, layer, moments, convention="literal"):
    """``(chi_1, chi_2)``: prefactor times ``E[phi'(sqrt(q*) z)^2]`` and ``E[phi''(sqrt(q*) z)^2]``."""
    phi = moments.phi
    if phi.d2 is None:
        raise PreconditionError(f"curvature needs a twice differentiable activation, got {phi.name}")
    pref = layer.chi_prefactor(convention)
    chi1 = pref * gaussian_expectation(q_star, lambda u: phi.d1(u) ** 2, moments)
    chi2 = pref * gaussian_expectation(q_star, lambda u: phi.d2(u) ** 2, moments)
    return float(chi1), float(chi2)


def curvature_step(geo, chi1, chi2):
    if not chi1 > 0:
        raise NumericalFailure(f"degenerate metric: chi_1 = {chi1}")
    return CurveGeometry(chi1 * geo.g, 3.0 * chi2 / chi1**2 + geo.kappa_sq / chi1, geo.q_star)


def propagate_curvature(geo, layer, moments, convention="literal"):
    """``g -> chi_1 g`` and ``kappa^2 -> 3 chi_2 / chi_1^2 + kappa^2 / chi_1`` at ``geo.q_star``."""
    chi1, chi2 = curvature_chis(geo.q_star, layer, moments, convention)
    return curvature_step(geo, chi1, chi2)


def measure_curve(curve):
    """Total length and circumcircle curvature of a polyline.

    Closed curves include the closing segment and get a curvature at every
    point; open curves get one at each interior point.
    """
    p = curve.points
    if p.shape[0] < MIN_CURVE_POINTS:
        raise PreconditionError(f"need at least {MIN_CURVE_POINTS} points, got {p.shape[0]}")
    if curve.closed:
        prev, mid, nxt = np.roll(p, 1, axis=0), p, np.roll(p, -1, axis=0)
        seg = np.roll(p, -1, axis=0) - p
    else:
        prev, mid, nxt = p[:-2], p[1:-1], p[2:]
        seg = np.diff(p, axis=0)
    length = float(np.sum(np.linalg.norm(seg, axis=1)))
    a = mid - prev
    b = nxt - mid
    c = nxt - prev
    aa = np.sum(a * a, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        b_perp = b - (np.sum(a * b, axis=1) / aa)[:, None] * a
        kappa = 2.0 * np.linalg.norm(b_perp, axis=1) / (np.linalg.norm(b, axis=1) * np.linalg.norm(c, axis=1))
    kappa = np.where(np.isfinite(kappa), kappa, 0.0)
    return length, kappa


def propagate_curve(net, curve):
    """Images of the curve at every layer's pre-activation, first layer to output."""
    if curve.points.shape[1] != net.layers[0].n_in:
        raise PreconditionError("curve dimension does not match the network input")
    _, trace = forward(net, curve.points)
    return [DiscreteCurve(pre, curve.closed) for pre in trace.pre_activations]


def circle_curve(n_points, dim=2, radius=1.0, basis=None):
    """``n_points`` on a circle of ``radius`` in the plane spanned by ``basis`` (default first two axes)."""
    t = 2.0 * math.pi * np.arange(n_points) / n_points
    if basis is None:
        basis = np.eye(dim)[:2]
    basis = np.asarray(basis, dtype=np.float64)
    pts = radius * (np.cos(t)[:, None] * basis[0] + np.sin(t)[:, None] * basis[1])
    return DiscreteCurve(pts, closed=True)


def curves_to_csv(curves):
    """Long table with one row per (layer, point); narrower layers leave trailing columns empty."""
    width = max(c.points.shape[1] for c in curves)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "point_index"] + [f"x{i}" for i in range(width)])
    for layer, c in enumerate(curves, start=1):
        for i, row in enumerate(c.points):
            vals = [repr(float(v)) for v in row]
            w.writerow([layer, i] + vals + [""] * (width - len(vals)))
    return buf.getvalue()


def curve_summary(curves):
    out = []
    for layer, c in enumerate(curves, start=1):
        length, kappa = measure_curve(c)
        out.append({"layer": layer, "length": length, "mean_curvature": float(np.mean(kappa))})
    return out


def curve_summary_json(curves):
    return json.dumps(curve_summary(curves), indent=1, sort_keys=True) + "\n"
