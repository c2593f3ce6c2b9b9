"""Spatio-temporal KV-cache compression for streaming causal attention.

The package splits a bounded attention budget between a temporal working
cache (reference frame, sliding window, score-selected anchors) and a
long-term spatial cache (a voxel grid of merged token representatives),
and replays recorded q/k/v traces to measure what the compression does to
memory growth and attention outputs.
"""

from .attention import AttentionMask, AttentionResult, attend, build_chunk_mask
from .errors import (
    ConfigError,
    DegenerateVectorError,
    DimensionError,
    EmptySupportError,
    InvariantViolation,
    StacacheError,
    TraceFormatError,
    VoxelRangeError,
)
from .kernel import HALF_MAX, cosine, dot, half_roundtrip, masked_softmax, weighted_mean
from .pipeline import (
    BudgetSplit,
    Policy,
    ReplayStats,
    StreamReplayer,
    allocate_budget,
    compare,
    divergence_report,
    run_stream,
)
from .spatial import (
    VoxelCell,
    VoxelCoord,
    VoxelStore,
    morton_decode,
    morton_encode,
    voxel_of,
)
from .temporal import TemporalCache
from .tokens import CacheConfig, CachedToken, FrameTokens, Origin, TokenId, validate_config
from .traceio import TraceHeader, TraceRecord, read_trace, synth_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "AttentionResult",
    "BudgetSplit",
    "CacheConfig",
    "CachedToken",
    "ConfigError",
    "DegenerateVectorError",
    "DimensionError",
    "EmptySupportError",
    "FrameTokens",
    "HALF_MAX",
    "InvariantViolation",
    "Origin",
    "Policy",
    "ReplayStats",
    "StacacheError",
    "StreamReplayer",
    "TemporalCache",
    "TokenId",
    "TraceFormatError",
    "TraceHeader",
    "TraceRecord",
    "VoxelCell",
    "VoxelCoord",
    "VoxelRangeError",
    "VoxelStore",
    "allocate_budget",
    "attend",
    "build_chunk_mask",
    "compare",
    "cosine",
    "divergence_report",
    "dot",
    "half_roundtrip",
    "masked_softmax",
    "morton_decode",
    "morton_encode",
    "read_trace",
    "run_stream",
    "synth_trace",
    "validate_config",
    "voxel_of",
    "weighted_mean",
    "write_trace",
]
