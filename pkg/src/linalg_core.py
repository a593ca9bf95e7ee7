"""
Dense matrix primitives shared by every loss and solver.
All matrices are 2-D float64 numpy arrays; rows are samples or classes.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import softmax

from errors import NumericalError

logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]
Vector = NDArray[np.float64]


@dataclass(frozen=True)
class SharpenConfig:
    """Temperature T2 of the sharpening function"""
    temperature_t2: float = 0.1

    def __post_init__(self):
        if not self.temperature_t2 > 0:
            raise ValueError(f"temperature_t2 must be positive, got {self.temperature_t2}")


def as_matrix(m) -> Matrix:
    """Coerce to a 2-D float64 array, promoting vectors to a single row"""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    return arr


def require_finite(m, name: str = "input"):
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")


def row_softmax(m, temperature: float = 1.0) -> Matrix:
    """Softmax of each row of m / temperature (max-subtracted)"""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m = as_matrix(m)
    require_finite(m, "softmax input")
    return softmax(m / temperature, axis=1)


def softmax_backward(probs, grad, temperature: float = 1.0, axis: int = 1) -> Matrix:
    """Gradient w.r.t. the logits x of y = softmax(x / temperature) along axis"""
    probs = np.asarray(probs, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    inner = np.sum(grad * probs, axis=axis, keepdims=True)
    return probs * (grad - inner) / temperature


def sharpen(p, cfg: SharpenConfig):
    """p_i^(1/T2) / sum_j p_j^(1/T2), applied per row; accepts a vector or a matrix"""
    arr = np.asarray(p, dtype=np.float64)
    rows = as_matrix(arr)
    require_finite(rows, "sharpen input")
    if np.any(rows < 0):
        raise ValueError("sharpen input has negative entries")
    sums = rows.sum(axis=1)
    if np.any(sums == 0):
        raise ValueError("sharpen input has an all-zero row")
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("sharpen input rows must sum to 1")

    # log-space keeps p^(1/T2) from underflowing for tiny p
    with np.errstate(divide='ignore'):
        logp = np.log(rows)
    out = softmax(logp / cfg.temperature_t2, axis=1)
    return out[0] if arr.ndim == 1 else out


def row_normalize_phi(m) -> Matrix:
    """Scale each row to sum to 1; all-zero rows become uniform"""
    m = as_matrix(m)
    require_finite(m, "phi input")
    if np.any(m < 0):
        raise ValueError("phi input has negative entries")
    sums = m.sum(axis=1, keepdims=True)
    zero = sums[:, 0] == 0
    out = np.empty_like(m)
    out[~zero] = m[~zero] / sums[~zero]
    out[zero] = 1.0 / m.shape[1]
    return out


def row_normalize_phi_backward(m, grad) -> Matrix:
    """Gradient of phi; zero rows sit on the constant fallback branch and get 0"""
    m = as_matrix(m)
    grad = as_matrix(grad)
    sums = m.sum(axis=1, keepdims=True)
    zero = sums[:, 0] == 0
    out = np.zeros_like(m)
    y = m[~zero] / sums[~zero]
    g = grad[~zero]
    out[~zero] = (g - np.sum(g * y, axis=1, keepdims=True)) / sums[~zero]
    return out


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def frobenius_inner(a, b) -> float:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def l2_normalize_rows(m, eps: float = 1e-8):
    """Unit-norm rows; returns (normalized, norms). Zero rows are nudged by eps first"""
    m = as_matrix(m).copy()
    norms = np.linalg.norm(m, axis=1)
    degenerate = norms == 0
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} zero-norm rows perturbed by {eps} before normalisation")
        m[degenerate] += eps
        norms = np.linalg.norm(m, axis=1)
    return m / norms[:, None], norms
