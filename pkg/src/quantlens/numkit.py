"""Small numeric toolkit used by every analysis module.

All routines here do their arithmetic in float64 no matter what dtype the
caller hands in, because the model side of the package runs float32 and we
do not want metric values to wobble with weight precision. Inputs are
validated for finiteness at the boundary; downstream code can then assume
clean arrays.

numpy/scipy do the heavy lifting (LAPACK svd and cholesky). What this module
adds on top is the conventions: a deterministic SVD sign, bits-vs-nats
handling, tie-breaking for top-k sets, and the error types raised on
degenerate input.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateSample, InvalidInput, NumericalFailure

# Probabilities this close to a valid simplex point are renormalized rather
# than rejected; anything further off is a caller bug.
PROB_SUM_TOL = 1e-6

# Vectors with a smaller norm than this have no meaningful direction.
NORM_FLOOR = 1e-12

# Smallest admissible top-k set for jaccard_top_fraction. Tiny layers would
# otherwise compare singleton sets, which are all-or-nothing.
JACCARD_K_MIN = 4


def as_array(x, name="array", ndim=None):
    """Convert to a float64 ndarray and reject non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise InvalidInput(f"{name}: expected {ndim}-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name}: contains NaN or Inf")
    return a


@dataclass
class SvdResult:
    """Thin SVD of a real matrix, with a fixed sign convention.

    u: (m, r) left singular vectors as columns
    s: (r,) singular values, non-increasing
    v: (n, r) right singular vectors as columns
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def svd(m, full=False):
    """SVD with a deterministic sign: the largest-magnitude entry of each
    right singular vector is made positive (ties: first such entry wins).

    LAPACK's sign choice is arbitrary and can differ between runs of the
    pipeline on reordered but equivalent data; pinning it makes archived
    subspaces comparable.
    """
    a = as_array(m, "svd input", ndim=2)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=full)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"svd did not converge: {e}") from e
    v = vt.T
    r = s.shape[0]
    for j in range(min(r, v.shape[1])):
        col = v[:, j]
        pivot = np.argmax(np.abs(col))
        if col[pivot] < 0:
            v[:, j] = -col
            if j < u.shape[1]:
                u[:, j] = -u[:, j]
    return SvdResult(u=u, s=s, v=v)


def _clean_prob(p, name):
    a = as_array(p, name, ndim=1)
    if a.size == 0:
        raise InvalidInput(f"{name}: empty distribution")
    if np.any(a < 0):
        raise InvalidInput(f"{name}: negative probability entries")
    total = a.sum()
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise InvalidInput(f"{name}: sums to {total:.8f}, not 1")
    return a / total


def shannon_entropy(p, base2=True):
    """Entropy of a distribution, in bits by default (nats if base2=False).

    Zero entries contribute zero (0*log 0 := 0).
    """
    a = _clean_prob(p, "entropy input")
    nz = a[a > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return h / np.log(2.0) if base2 else h


def jsd(p, q):
    """Jensen-Shannon divergence in bits, always within [0, 1].

    Computed as H(m) - (H(p) + H(q))/2 with m the midpoint mixture, which
    avoids per-term 0*log(0/0) bookkeeping.
    """
    a = _clean_prob(p, "jsd p")
    b = _clean_prob(q, "jsd q")
    if a.shape != b.shape:
        raise InvalidInput(f"jsd: length mismatch {a.shape} vs {b.shape}")
    m = 0.5 * (a + b)
    val = shannon_entropy(m) - 0.5 * (shannon_entropy(a) + shannon_entropy(b))
    return float(min(1.0, max(0.0, val)))


def cosine(a, b):
    """Cosine similarity. Degenerate inputs (norm < 1e-12) give 0.0."""
    x = as_array(a, "cosine a", ndim=1)
    y = as_array(b, "cosine b", ndim=1)
    if x.shape != y.shape:
        raise InvalidInput(f"cosine: length mismatch {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx < NORM_FLOOR or ny < NORM_FLOOR:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def kurtosis(x):
    """Pearson kurtosis m4/m2^2 (population moments, not excess).

    Normal data gives ~3. Needs at least 4 samples and non-degenerate
    variance (> 1e-18), else DegenerateSample.
    """
    a = as_array(x, "kurtosis input", ndim=1)
    if a.size < 4:
        raise InvalidInput(f"kurtosis: need >= 4 samples, got {a.size}")
    c = a - a.mean()
    m2 = float(np.mean(c * c))
    if m2 <= 1e-18:
        raise DegenerateSample("kurtosis: variance below 1e-18")
    m4 = float(np.mean(c ** 4))
    return m4 / (m2 * m2)


def top_fraction_indices(a, fraction, k_min=JACCARD_K_MIN):
    """Indices of the top ceil(fraction*len) entries by value, descending.

    At least k_min indices are returned. Ties broken toward the lower index
    (stable sort on negated values).
    """
    v = as_array(a, "top fraction input", ndim=1)
    if not 0.0 < fraction <= 1.0:
        raise InvalidInput(f"fraction must be in (0, 1], got {fraction}")
    k = max(int(np.ceil(fraction * v.size)), k_min)
    k = min(k, v.size)
    order = np.argsort(-v, kind="stable")
    return frozenset(int(i) for i in order[:k])


def jaccard_top_fraction(a, b, fraction, k_min=JACCARD_K_MIN):
    """Jaccard overlap of the top-fraction index sets of two vectors."""
    x = as_array(a, "jaccard a", ndim=1)
    y = as_array(b, "jaccard b", ndim=1)
    if x.shape != y.shape:
        raise InvalidInput(f"jaccard: length mismatch {x.shape} vs {y.shape}")
    sa = top_fraction_indices(x, fraction, k_min)
    sb = top_fraction_indices(y, fraction, k_min)
    union = len(sa | sb)
    if union == 0:
        return 0.0
    return len(sa & sb) / union


def cholesky_inverse(h, sym_tol=1e-8):
    """Inverse of a symmetric positive-definite matrix via its Cholesky
    factor. Raises NumericalFailure when the factorization fails (matrix
    not positive definite) and InvalidInput when h is visibly asymmetric.
    """
    a = as_array(h, "cholesky input", ndim=2)
    if a.shape[0] != a.shape[1]:
        raise InvalidInput(f"cholesky_inverse: not square: {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > sym_tol * scale:
        raise InvalidInput("cholesky_inverse: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"cholesky failed: {e}") from e
    eye = np.eye(a.shape[0])
    linv = scipy.linalg.solve_triangular(low, eye, lower=True)
    return linv.T @ linv
