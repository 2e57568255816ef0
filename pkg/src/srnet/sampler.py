"""Weight samplers with prescribed stable rank and spectral norm.

A layer weight is drawn as ``W = U diag(d) V^T`` with ``U``, ``V`` Haar
orthogonal and a singular spectrum ``d`` whose largest entry equals the target
spectral norm and whose squared sum equals ``stable_rank * spectral_norm**2``.
Two spectrum samplers are provided: ``sphere`` draws the tail uniformly on the
part of the sphere that lies inside the cube (rejection from half-normal
directions) and ``cube`` draws uniformly in the cube and then normalises.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import InfeasibleProjectionError, PreconditionError, RejectionBudgetExhausted

DEFAULT_MAX_ATTEMPTS = 10**6
# cap on candidates materialised per rejection round (elements, not rows)
_MAX_CHUNK_ELEMENTS = 1 << 22
ERF_CONVENTIONS = ("gaussian_integral", "upper_tail", "standard")


@dataclass(frozen=True)
class SpectrumSpec:
    """Target stable rank ``r_t >= 1`` and spectral norm ``s_t > 0`` for one layer."""

    stable_rank: float
    spectral_norm: float

    def __post_init__(self):
        if not (math.isfinite(self.stable_rank) and self.stable_rank >= 1.0):
            raise PreconditionError(f"stable rank must be >= 1, got {self.stable_rank}")
        if not (math.isfinite(self.spectral_norm) and self.spectral_norm > 0.0):
            raise PreconditionError(f"spectral norm must be > 0, got {self.spectral_norm}")

    def check_dimension(self, m):
        if self.stable_rank > m:
            raise PreconditionError(
                f"stable rank {self.stable_rank} exceeds the minimal layer dimension {m}"
            )

    @property
    def frobenius_sq(self):
        return self.stable_rank * self.spectral_norm**2


@dataclass(frozen=True)
class AcceptanceBoundInput:
    m: int
    stable_rank: float
    eta: float

    def __post_init__(self):
        if self.m < 2:
            raise PreconditionError(f"m must be >= 2, got {self.m}")
        if not self.eta > 0:
            raise PreconditionError(f"eta must be positive, got {self.eta}")
        floor = math.sqrt((self.stable_rank - 1.0) / (self.m - 1))
        if self.eta < floor:
            raise PreconditionError(f"eta={self.eta} is below sqrt((r_t-1)/(m-1))={floor}")


def _trivial_spectrum(spec, m):
    d = np.zeros(m)
    d[0] = spec.spectral_norm
    return d


def _reject(rng, propose, m1, max_attempts):
    """Return the first accepted candidate and the 1-based attempt count.

    Candidates are proposed in geometrically growing batches; accepting the
    first success in stream order keeps the sampler exact.
    """
    attempts = 0
    chunk = 1
    limit = max(1, _MAX_CHUNK_ELEMENTS // max(m1, 1))
    while attempts < max_attempts:
        b = min(chunk, max_attempts - attempts)
        cand, ok = propose(b)
        hits = np.flatnonzero(ok)
        if hits.size:
            return cand[hits[0]], attempts + int(hits[0]) + 1
        attempts += b
        chunk = min(chunk * 2, limit)
    raise RejectionBudgetExhausted(attempts)


def sample_singular_spectrum_sphere(rng, spec, n_out, n_in, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """Spectrum uniform on ``[0, s_t]^{m-1}`` intersected with the sphere of radius ``s_t sqrt(r_t - 1)``.

    Returns ``(d, attempts)`` with ``d[0] == s_t == max(d)``.
    """
    m = min(n_out, n_in)
    spec.check_dimension(m)
    if spec.stable_rank == 1.0 or m == 1:
        return _trivial_spectrum(spec, m), 1
    radius = math.sqrt(spec.stable_rank - 1.0)

    def propose(b):
        x = np.abs(rng.standard_normal((b, m - 1)))
        norm = np.sqrt(np.sum(x * x, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            y = x * (radius / norm)[:, None]
            ok = np.all(y <= 1.0, axis=1) & (norm > 0)
        return y, ok

    tail, attempts = _reject(rng, propose, m - 1, max_attempts)
    d = spec.spectral_norm * np.concatenate(([1.0], tail))
    return d, attempts


def sample_singular_spectrum_cube(rng, spec, n_out, n_in, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """Spectrum from uniform cube samples rescaled onto the sphere; accepted when the scale is <= 1."""
    m = min(n_out, n_in)
    spec.check_dimension(m)
    if spec.stable_rank == 1.0 or m == 1:
        return _trivial_spectrum(spec, m), 1
    radius = math.sqrt(spec.stable_rank - 1.0)

    def propose(b):
        x = rng.random((b, m - 1))
        norm = np.sqrt(np.sum(x * x, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = radius / norm
            ok = (scale <= 1.0) & (norm > 0)
        return x * scale[:, None], ok

    tail, attempts = _reject(rng, propose, m - 1, max_attempts)
    d = spec.spectral_norm * np.concatenate(([1.0], tail))
    return d, attempts


SPECTRUM_SAMPLERS = {
    "sphere": sample_singular_spectrum_sphere,
    "cube": sample_singular_spectrum_cube,
}


def sample_spectrum(rng, spec, n_out, n_in, method="sphere", max_attempts=DEFAULT_MAX_ATTEMPTS,
                    full_rank="error"):
    """Dispatch to a spectrum sampler.

    ``full_rank="exact"`` returns the unique feasible spectrum (all values equal
    to ``s_t``) when ``r_t == m``; the rejection samplers can never accept
    there, so the default is to let them exhaust the budget.
    """
    try:
        sampler = SPECTRUM_SAMPLERS[method]
    except KeyError:
        raise PreconditionError(f"unknown spectrum method {method!r}") from None
    if full_rank not in ("error", "exact"):
        raise PreconditionError(f"full_rank must be 'error' or 'exact', got {full_rank!r}")
    m = min(n_out, n_in)
    if full_rank == "exact" and m > 1 and abs(spec.stable_rank - m) <= 1e-12:
        return np.full(m, float(spec.spectral_norm)), 0
    return sampler(rng, spec, n_out, n_in, max_attempts=max_attempts)


def assemble_weight(rng, spec, n_out, n_in, method="sphere", max_attempts=DEFAULT_MAX_ATTEMPTS,
                    full_rank="error"):
    """``W = U diag(d) V^T`` with Haar ``U`` in O(n_out), ``V`` in O(n_in), shape ``(n_out, n_in)``.

    Only the first ``m = min(n_out, n_in)`` columns of ``U`` and ``V`` meet a
    non-zero singular value, so only those are drawn.
    """
    d, _ = sample_spectrum(rng, spec, n_out, n_in, method, max_attempts, full_rank)
    return weight_from_spectrum(rng, d, n_out, n_in)


def weight_from_spectrum(rng, d, n_out, n_in):
    """``U diag(d) V^T`` for Haar ``U``, ``V`` and a given spectrum of length ``min(n_out, n_in)``."""
    d = np.asarray(d, dtype=np.float64)
    m = d.size
    if m != min(n_out, n_in):
        raise PreconditionError(f"spectrum has {m} values, expected {min(n_out, n_in)}")
    u = linalg.sample_haar_orthogonal(rng, n_out, m)
    v = linalg.sample_haar_orthogonal(rng, n_in, m)
    return (u * d) @ v.T


def sample_weight_action(rng, spec, n_out, n_in, inputs, method="sphere",
                         max_attempts=DEFAULT_MAX_ATTEMPTS, full_rank="error"):
    """Draw ``W @ inputs`` for a fresh ``W ~ assemble_weight`` without forming ``W``.

    ``inputs`` has shape ``(n_in, n)``. Uses that ``V^T Q`` (and ``U Q``) is a
    uniformly random orthonormal frame for any fixed orthonormal ``Q``, so the
    joint law of the ``n`` output columns is identical to the explicit product
    at ``O(width * n^2)`` cost.
    """
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != n_in:
        raise PreconditionError(f"inputs must have shape ({n_in}, n), got {a.shape}")
    d, _ = sample_spectrum(rng, spec, n_out, n_in, method, max_attempts, full_rank)
    m = d.size
    q_a, r_a = np.linalg.qr(a)
    frame_in = linalg.sample_haar_orthogonal(rng, n_in, q_a.shape[1])
    b = d[:, None] * (frame_in[:m] @ r_a)
    q_b, r_b = np.linalg.qr(b)
    frame_out = linalg.sample_haar_orthogonal(rng, n_out, q_b.shape[1])
    return frame_out @ r_b


def weight_second_moment(spec, n_out, n_in):
    """``E[W_ij^2]``; all mixed second moments vanish."""
    return spec.frobenius_sq / (n_out * n_in)


def erf_term(x, convention="gaussian_integral"):
    """The ``erf`` appearing in the acceptance bound under a chosen normalisation.

    ``gaussian_integral``: ``int_0^x Dz = Phi(x) - 1/2``, so ``1 - 2 erf(1/eta)``
    is the two-sided tail ``P(|z| > 1/eta)``. ``upper_tail``: ``Q(x) = 1 - Phi(x)``.
    ``standard``: the usual ``2/sqrt(pi) int_0^x exp(-t^2) dt``.
    """
    if convention == "gaussian_integral":
        return 0.5 * math.erf(x / math.sqrt(2.0))
    if convention == "upper_tail":
        return 0.5 * math.erfc(x / math.sqrt(2.0))
    if convention == "standard":
        return math.erf(x)
    raise PreconditionError(f"unknown erf convention {convention!r}; use one of {ERF_CONVENTIONS}")


def acceptance_lower_bound(inp, erf_convention="gaussian_integral"):
    """Lower bound on the acceptance probability of the sphere sampler.

    May be negative (vacuous) and is returned as-is.
    """
    k = inp.m - 1
    z = (inp.stable_rank - 1.0) / (inp.eta**2 * k)
    chi_tail = (z * math.exp(1.0 - z)) ** (k / 2.0)
    coord_tail = k * (1.0 - 2.0 * erf_term(1.0 / inp.eta, erf_convention))
    return 1.0 - chi_tail - coord_tail


def best_acceptance_bound(m, stable_rank, etas, erf_convention="gaussian_integral"):
    """Maximise the bound over a grid of ``eta``; infeasible grid points are skipped.

    Returns ``(eta, bound)``.
    """
    floor = math.sqrt((stable_rank - 1.0) / (m - 1))
    best = None
    for eta in etas:
        if eta < floor or eta <= 0:
            continue
        b = acceptance_lower_bound(AcceptanceBoundInput(m, stable_rank, float(eta)), erf_convention)
        if best is None or b > best[1]:
            best = (float(eta), b)
    if best is None:
        raise PreconditionError("no feasible eta in the grid")
    return best


def _rescale_tail(tail, target_sq, cap):
    """Scale ``tail`` by one factor so its squared sum is ``target_sq``, clipping entries at ``cap``.

    ``tail`` is non-increasing and non-negative; clipped entries are pinned to
    ``cap`` and the factor is re-solved on the rest.
    """
    out = np.zeros_like(tail)
    n_clipped = 0
    for _ in range(tail.size + 1):
        rest = tail[n_clipped:]
        remaining = target_sq - n_clipped * cap**2
        rest_sq = float(np.sum(rest * rest))
        if remaining <= 0.0 or rest_sq == 0.0:
            factor = 0.0
        else:
            factor = math.sqrt(remaining / rest_sq)
        scaled = factor * rest
        over = int(np.count_nonzero(scaled > cap))
        if over == 0:
            out[:n_clipped] = cap
            out[n_clipped:] = scaled
            return out
        n_clipped += over
    raise InfeasibleProjectionError("could not redistribute the singular spectrum")


def project_stable_rank(w, spec):
    """Renormalise the singular spectrum of ``w`` to hit ``spec`` while keeping its singular vectors.

    The top singular value is set to ``s_t``; the rest are scaled by a common
    factor (clipped at ``s_t``) so that the squared spectrum sums to ``r_t s_t^2``.
    """
    w = np.asarray(w, dtype=np.float64)
    dec = linalg.svd(w)
    s = dec.singular_values
    if s[0] == 0.0:
        raise InfeasibleProjectionError("cannot project the zero matrix")
    tol = max(w.shape) * np.finfo(np.float64).eps * s[0]
    rank = int(np.count_nonzero(s > tol))
    if rank < math.ceil(spec.stable_rank - 1e-12):
        raise InfeasibleProjectionError(
            f"matrix rank {rank} is too small for stable rank {spec.stable_rank}"
        )
    tail = np.where(s[1:] > tol, s[1:], 0.0)
    cap = spec.spectral_norm
    new = np.empty_like(s)
    new[0] = cap
    new[1:] = _rescale_tail(tail, (spec.stable_rank - 1.0) * cap**2, cap)
    return (dec.u * new) @ dec.v.T


def empirical_weight_moments(rng, spec, n_out, n_in, draws, index_pairs, method="sphere"):
    """Monte-Carlo estimates of ``E[W_ij W_kl]`` for ``index_pairs = [((i, j), (k, l)), ...]``.

    Returns ``(means, standard_errors)`` arrays aligned with ``index_pairs``.
    """
    rows = np.array([[p[0][0], p[0][1], p[1][0], p[1][1]] for p in index_pairs])
    acc = np.zeros(len(index_pairs))
    acc_sq = np.zeros(len(index_pairs))
    for _ in range(draws):
        w = assemble_weight(rng, spec, n_out, n_in, method)
        prod = w[rows[:, 0], rows[:, 1]] * w[rows[:, 2], rows[:, 3]]
        acc += prod
        acc_sq += prod * prod
    mean = acc / draws
    var = np.maximum(acc_sq / draws - mean**2, 0.0) * draws / max(draws - 1, 1)
    return mean, np.sqrt(var / draws)
