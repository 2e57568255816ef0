"""Dense linear algebra: norms, SVD, stable rank and random matrix generators.

Matrices are plain ``float64`` numpy arrays. Randomness always comes from an
explicitly passed :class:`numpy.random.Generator`; use :func:`make_rng` to
build one from an integer seed.
"""

import struct
from typing import NamedTuple

import numpy as np

from .errors import DataError, NumericalFailure, PreconditionError, UndefinedStableRankError

MATRIX_MAGIC = b"SRNETMAT"
_HEADER = struct.Struct("<8sQQ")


class Svd(NamedTuple):
    """Thin singular value decomposition ``a = u @ diag(singular_values) @ v.T``."""

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray


def make_rng(seed):
    """Counter-based generator (Philox) seeded with a 64-bit unsigned integer."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise PreconditionError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def derive_rng(seed, *index):
    """Independent child generator for ensemble member ``index`` of a run seeded by ``seed``."""
    ss = np.random.SeedSequence([int(seed), *(int(i) for i in index)])
    return np.random.Generator(np.random.Philox(ss))


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise PreconditionError(f"expected a non-empty 2-d matrix, got shape {a.shape}")
    return a


def frobenius_norm(a):
    a = _as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def singular_values(a):
    """Singular values in non-increasing order."""
    a = _as_matrix(a)
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    if not np.all(np.isfinite(s)):
        raise NumericalFailure("SVD produced non-finite singular values")
    return s


def spectral_norm(a):
    """Largest singular value of ``a``."""
    return float(singular_values(a)[0])


def stable_rank(a):
    """``||a||_F^2 / ||a||_2^2``; raises for the zero matrix."""
    s = singular_values(a)
    top = s[0]
    if top == 0.0:
        raise UndefinedStableRankError("stable rank is undefined for the zero matrix")
    return float(np.sum((s / top) ** 2))


def svd(a):
    """Thin SVD with orthonormal ``u`` (rows x k) and ``v`` (cols x k), k = min(rows, cols)."""
    a = _as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise NumericalFailure("cannot decompose a matrix with non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    return Svd(u, s, vt.T)


def sample_gaussian_matrix(rng, rows, cols, std):
    """I.i.d. ``N(0, std^2)`` entries."""
    if not std > 0:
        raise PreconditionError(f"std must be positive, got {std}")
    return rng.standard_normal((rows, cols)) * std


def sample_haar_orthogonal(rng, n, k=None):
    """Haar-distributed orthogonal ``n x n`` matrix, or its first ``k`` columns.

    QR of a Gaussian matrix with the columns of Q flipped so that ``diag(R) > 0``;
    without the sign fix the result is not Haar distributed. The first ``k``
    columns of a Haar matrix only depend on the first ``k`` Gaussian columns,
    so ``k < n`` is an exact and much cheaper way to draw a uniform ``k``-frame.
    """
    if n < 1:
        raise PreconditionError(f"dimension must be >= 1, got {n}")
    k = n if k is None else k
    if not 1 <= k <= n:
        raise PreconditionError(f"column count must be in [1, {n}], got {k}")
    g = rng.standard_normal((n, k))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def save_matrix(path, a):
    """Binary matrix file: 8-byte magic, rows and cols as little-endian u64, row-major f64 LE."""
    a = _as_matrix(a)
    with open(path, "wb") as f:
        write_matrix_blob(f, a)


def read_matrix_blob(f):
    """Read one binary matrix from an open file object."""
    header = f.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise DataError("truncated matrix header")
    magic, rows, cols = _HEADER.unpack(header)
    if magic != MATRIX_MAGIC:
        raise DataError(f"bad matrix magic {magic!r}, expected {MATRIX_MAGIC!r}")
    nbytes = rows * cols * 8
    body = f.read(nbytes)
    if len(body) != nbytes:
        raise DataError(f"truncated matrix body: expected {nbytes} bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix_blob(f, a):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64), dtype="<f8")
    if a.ndim != 2:
        raise PreconditionError("matrix blobs must be 2-d")
    f.write(_HEADER.pack(MATRIX_MAGIC, a.shape[0], a.shape[1]))
    f.write(a.tobytes(order="C"))


def load_matrix(path):
    with open(path, "rb") as f:
        return read_matrix_blob(f)


def save_matrix_csv(path, a):
    """One row per line, comma separated, shortest round-trip float repr, no header."""
    a = _as_matrix(a)
    with open(path, "w", newline="") as f:
        for row in a:
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")


def load_matrix_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
