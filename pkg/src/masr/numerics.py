"""Dense float64 primitives and a central-difference gradient oracle.

Vectors and matrices are plain numpy arrays; ``as_vector`` / ``as_matrix``
enforce the shape and finiteness invariants at API boundaries.
"""

import numpy as np

from .errors import ShapeError

# log terms clamp probabilities into [EPS, 1 - EPS]
EPS = 1e-7

# sigmoid(36) is the largest input whose output still rounds strictly below 1.0
_SIGMOID_CLIP = 36.0


def as_vector(x, name="vector"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matvec(M, x):
    M = np.asarray(M, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if M.ndim != 2 or x.ndim != 1 or M.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply matrix of shape {M.shape} by vector of shape {x.shape}")
    return M @ x


def sigmoid(x):
    """Elementwise logistic function, saturating but strictly inside (0, 1)."""
    x = np.clip(np.asarray(x, dtype=np.float64), -_SIGMOID_CLIP, _SIGMOID_CLIP)
    return 1.0 / (1.0 + np.exp(-x))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def log_softmax(logits):
    """Row-wise log-softmax with max shifting; accepts 1-d or 2-d input."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, true_class):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"logits must be 1-d, got shape {z.shape}")
    k = int(true_class)
    if not 0 <= k < z.shape[0]:
        raise IndexError(f"class index {k} out of range for {z.shape[0]} logits")
    # log-softmax of the true class is <= 0 mathematically; guard the rounding
    return max(0.0, float(-log_softmax(z)[k]))


def clamp_probability(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def bce(p, target):
    """Binary cross entropy of probability ``p`` against a 0/1 ``target``.

    Works elementwise on arrays; returns a float for scalar input.
    """
    q = clamp_probability(p)
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(q) + (1.0 - t) * np.log1p(-q))
    return float(out) if out.ndim == 0 else out


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor=1e-8):
    """Norm-wise relative error ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
