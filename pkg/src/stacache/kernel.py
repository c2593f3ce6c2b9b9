"""Small numeric primitives used by the caches and the attention engine.

Everything here works on float64 and is deliberately boring: these are the
operations whose exact semantics the rest of the package is built on, so
they validate their inputs strictly instead of broadcasting their way past
mistakes.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EmptySupportError

# Largest finite float16 value; casts beyond this saturate instead of
# producing inf so that cache contents stay finite.
HALF_MAX = 65504.0


def _vec(a, name: str = "vector") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    a = _vec(a, "a")
    b = _vec(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def cosine(a, b) -> float:
    """Cosine similarity, clipped into [-1, 1] against rounding spill.

    Zero-norm inputs have no direction; they raise DegenerateVectorError
    rather than silently comparing equal to everything.
    """
    a = _vec(a, "a")
    b = _vec(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over the unmasked entries of a logit row.

    Masked entries get probability exactly 0.0 and do not participate in
    the max-subtraction or the normalizer, so a -1e9 logit under a mask
    cannot leak mass the way additive masking would.
    """
    logits = _vec(logits, "logits")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise DimensionError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any():
        raise EmptySupportError("softmax row with every entry masked")
    out = np.zeros_like(logits)
    sel = logits[mask]
    e = np.exp(sel - sel.max())
    out[mask] = e / e.sum()
    return out


def weighted_mean(vectors, weights) -> np.ndarray:
    """Convex combination sum(w_i * v_i) / sum(w_i) of row vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise DimensionError(f"need a non-empty 2-D stack of vectors, got shape {vectors.shape}")
    weights = _vec(weights, "weights")
    if weights.shape[0] != vectors.shape[0]:
        raise DimensionError(f"{vectors.shape[0]} vectors but {weights.shape[0]} weights")
    if not (weights > 0.0).all():
        raise DegenerateVectorError("weights must be strictly positive")
    return (weights[:, None] * vectors).sum(axis=0) / weights.sum()


def half_roundtrip(a) -> np.ndarray:
    """Quantize through float16 and back to float64.

    Values past the float16 range saturate to +-HALF_MAX; callers that
    care can count those entries beforehand with np.abs(a) > HALF_MAX.
    Idempotent: a second roundtrip is the identity.
    """
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(over="ignore"):
        h = a.astype(np.float16)
    out = h.astype(np.float64)
    np.copyto(out, np.copysign(HALF_MAX, out), where=np.isinf(h))
    return out
