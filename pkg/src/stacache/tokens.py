"""Token and configuration records shared by the temporal and spatial caches."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class TokenId(NamedTuple):
    """Identity of a token by its birth coordinates in the stream.

    Merged tokens synthesized inside the spatial cache carry frame_idx -1
    and a store-assigned serial in token_idx, so ids stay unique without
    pretending a merged vector was ever part of a frame.
    """

    frame_idx: int
    token_idx: int


class Origin(enum.Enum):
    """How a cached token got to where it currently lives."""

    FRESH = "fresh"          # in-flight chunk token, not yet cached
    WINDOW = "window"        # resident in the temporal window
    ANCHOR = "anchor"        # retained by top-k score selection
    MERGED = "merged"        # long-term voxel representative (count >= 1)
    BUFFERED = "buffered"    # waiting in a voxel buffer for aggregation


@dataclass
class CachedToken:
    """One cache entry: a key/value pair plus its bookkeeping.

    Mutable on purpose. Scores decay in place every chunk and voxel
    representatives are fused in place; each (layer, head) channel has a
    single writer, so nothing here needs to be copy-on-write.
    """

    id: TokenId
    key: np.ndarray
    value: np.ndarray
    score: float = 0.0
    position: Optional[np.ndarray] = None
    count: int = 1
    weight: float = 1.0
    origin: Origin = Origin.FRESH


@dataclass
class FrameTokens:
    """All tokens one frame contributes to one (layer, head) channel.

    positions carries one 3-D point per token; position_mask marks which
    rows are real. Rows with a False mask (no geometry for that token) are
    junk and must never be read.
    """

    frame_idx: int
    queries: np.ndarray      # (N, d_h)
    keys: np.ndarray         # (N, d_h)
    values: np.ndarray       # (N, d_h)
    positions: np.ndarray    # (N, 3)
    position_mask: np.ndarray  # (N,) bool

    @property
    def token_count(self) -> int:
        return self.keys.shape[0]


@dataclass
class CacheConfig:
    """Tuning knobs for the compression scheme, with the published defaults.

    budget_multiplier is the total attendable budget in frame-token
    multiples; the three fractions split it between the temporal window,
    the anchor set, and spatial retrieval, and must sum to 1.
    """

    gamma: float = 0.9               # per-chunk score decay
    merge_lambda: float = 0.8        # cosine threshold for key merging
    voxel_size: float = 0.05         # edge length of a voxel cell
    g_cap: int = 4                   # merged representatives per voxel
    e_cap: int = 8                   # buffered evictees per voxel
    knn_radius_mult: float = 2.0     # retrieval neighborhood, in voxel sizes
    budget_multiplier: float = 8.0   # attendable budget, in frame-token multiples
    window_frac: float = 0.5
    anchor_frac: float = 0.25
    retrieve_frac: float = 0.25
    window_frames: int = 4           # frames kept verbatim in the window
    chunk_size: int = 4              # frames ingested per attention step
    half_precision: bool = False     # quantize cache contents through float16

    def splits(self) -> tuple[float, float, float]:
        return (self.window_frac, self.anchor_frac, self.retrieve_frac)


def validate_config(config: CacheConfig) -> list[str]:
    """Return a list of human-readable problems; empty means valid."""
    problems: list[str] = []
    c = config
    if not (0.0 < c.gamma < 1.0):
        problems.append(f"gamma must lie in (0, 1), got {c.gamma}")
    if not (-1.0 < c.merge_lambda <= 1.0):
        problems.append(f"merge_lambda must lie in (-1, 1], got {c.merge_lambda}")
    if not (c.voxel_size > 0.0):
        problems.append(f"voxel_size must be positive, got {c.voxel_size}")
    if c.g_cap < 1:
        problems.append(f"g_cap must be >= 1, got {c.g_cap}")
    if c.e_cap < 1:
        problems.append(f"e_cap must be >= 1, got {c.e_cap}")
    if not (c.knn_radius_mult > 0.0):
        problems.append(f"knn_radius_mult must be positive, got {c.knn_radius_mult}")
    if not (c.budget_multiplier > 0.0):
        problems.append(f"budget_multiplier must be positive, got {c.budget_multiplier}")
    fracs = c.splits()
    if any(f < 0.0 for f in fracs):
        problems.append(f"budget fractions must be non-negative, got {fracs}")
    elif abs(sum(fracs) - 1.0) > 1e-12:
        problems.append(f"budget fractions must sum to 1, got sum {sum(fracs)!r}")
    if c.window_frames < 1:
        problems.append(f"window_frames must be >= 1, got {c.window_frames}")
    if c.chunk_size < 1:
        problems.append(f"chunk_size must be >= 1, got {c.chunk_size}")
    # The window must fit inside its budget share: window_frames * N tokens
    # against window_frac * budget_multiplier * N, with N cancelling.
    if not problems and c.window_frames > c.window_frac * c.budget_multiplier + 1e-12:
        problems.append(
            f"window_frames={c.window_frames} exceeds its budget share "
            f"({c.window_frac} * {c.budget_multiplier} frames)"
        )
    return problems
