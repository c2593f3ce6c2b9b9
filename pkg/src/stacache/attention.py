"""Chunk-causal attention over cached and in-flight tokens.

Queries of one chunk attend bidirectionally to every token assembled for
that chunk (the cache snapshot plus the chunk itself); causality across
chunks is enforced upstream by what the caller puts into the key set, not
by masking here. The logit for a merged token carries an additive ln(count)
so that one representative with count n reproduces exactly the attention a
set of n duplicated keys would have received.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptySupportError


@dataclass
class AttentionMask:
    """Boolean (n_queries, n_keys) matrix; True marks an attendable pair."""

    allowed: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape


@dataclass
class AttentionResult:
    outputs: np.ndarray  # (n_queries, d_h) attention outputs
    mass: np.ndarray     # (n_keys,) attention mass received per key


def build_chunk_mask(cache_len: int, chunk_token_count: int) -> AttentionMask:
    """Mask for one chunk step: every query sees cache and chunk alike.

    Within a chunk attention is bidirectional, and the cache only ever
    contains strictly older tokens, so the mask is all True by
    construction. It exists as an explicit object so that variant masking
    schemes can be swapped in without touching attend().
    """
    if cache_len < 0 or chunk_token_count < 1:
        raise DimensionError(
            f"need cache_len >= 0 and chunk_token_count >= 1, "
            f"got {cache_len} and {chunk_token_count}"
        )
    n_keys = cache_len + chunk_token_count
    return AttentionMask(np.ones((chunk_token_count, n_keys), dtype=bool))


def attend(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    counts: np.ndarray,
    mask: AttentionMask,
    d_h: int,
) -> AttentionResult:
    """Scaled dot-product attention with a count-duplication bias.

    logit[i, j] = q_i . k_j / sqrt(d_h) + ln(counts[j]); rows are
    softmax-normalized over their unmasked keys only. Returns the outputs
    and the per-key attention mass summed over queries; the mass sums to
    the number of queries up to rounding.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise DimensionError("queries, keys, values must all be 2-D")
    if keys.shape[0] == 0:
        raise EmptySupportError("attend called with an empty key set")
    if queries.shape[1] != d_h or keys.shape[1] != d_h:
        raise DimensionError(
            f"head dim mismatch: queries {queries.shape}, keys {keys.shape}, d_h={d_h}"
        )
    if values.shape != keys.shape:
        raise DimensionError(f"values shape {values.shape} != keys shape {keys.shape}")
    if counts.shape != (keys.shape[0],):
        raise DimensionError(f"counts shape {counts.shape} != ({keys.shape[0]},)")
    if (counts < 1.0).any():
        raise DimensionError("counts must all be >= 1")
    allowed = np.asarray(mask.allowed, dtype=bool)
    if allowed.shape != (queries.shape[0], keys.shape[0]):
        raise DimensionError(
            f"mask shape {allowed.shape} != ({queries.shape[0]}, {keys.shape[0]})"
        )

    logits = queries @ keys.T / np.sqrt(float(d_h)) + np.log(counts)[None, :]
    if allowed.all():
        shifted = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(shifted)
    else:
        if not allowed.any(axis=1).all():
            raise EmptySupportError("a query row has every key masked")
        neg = np.where(allowed, logits, -np.inf)
        w = np.exp(neg - neg.max(axis=1, keepdims=True))  # exp(-inf) is exactly 0
    w /= w.sum(axis=1, keepdims=True)
    return AttentionResult(outputs=w @ values, mass=w.sum(axis=0))
