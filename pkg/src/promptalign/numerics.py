"""Dense float64 kernels shared by every other module.

All public functions are pure, operate on numpy float64 arrays and never
return NaN/Inf for valid inputs.
"""

import numpy as np

__all__ = ["as_vector", "as_matrix", "cosine_similarity", "softmax", "row_normalize_l2"]


def as_vector(x) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("vector contains non-finite entries")
    return v


def as_matrix(x) -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between u and v, clamped to [-1, 1].

    The clamp absorbs floating-point rounding so downstream costs
    1 - sim stay inside [0, 2].
    """
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("degenerate vector: zero norm")
    s = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, s))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax via max-shifted exponentials."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_vector(logits) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def row_normalize_l2(m) -> np.ndarray:
    """Scale each row to unit L2 norm."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero row at index {int(zero[0])}")
    return m / norms[:, None]
