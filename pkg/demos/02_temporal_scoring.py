"""
The temporal working cache
==========================

One (layer, head) channel keeps three tiers of recent history: the first
frame as a permanent reference, a FIFO window of the last few frames, and
a small set of score-ranked anchors fed by whatever the window expels.
Scores are attention mass accumulated with exponential decay, so a token
that stops being attended eventually loses its anchor seat.
"""

import numpy as np

from stacache import FrameTokens, TemporalCache

rng = np.random.default_rng(1)
N, D = 3, 4


def frame(idx):
    return FrameTokens(
        frame_idx=idx,
        queries=rng.normal(size=(N, D)),
        keys=rng.normal(size=(N, D)),
        values=rng.normal(size=(N, D)),
        positions=rng.uniform(-1, 1, size=(N, 3)),
        position_mask=np.ones(N, dtype=bool),
    )


cache = TemporalCache(window_frames=2, anchor_budget=2, gamma=0.9)
cache.register_reference(frame(0))
print("after reference:", cache.reference_count, "reference tokens")

# ingest three frames; the 2-frame window must expel frame 1
expelled = cache.ingest_frames([frame(1), frame(2), frame(3)])
print("window holds", cache.window_token_count, "tokens;",
      len(expelled), "tokens expelled from frame",
      expelled[0].id.frame_idx if expelled else None)

# pretend the attention step just ran: give every member some mass.
# decay means score ~ recent mass, not lifetime totals
for step in range(3):
    mass = rng.uniform(0, 1, size=cache.member_count)
    cache.update_scores(mass)
snap = cache.snapshot()
print("\nscores after three decayed updates:")
for t in snap[:4]:
    print(f"  token {tuple(t.id)}  score={t.score:.4f}  origin={t.origin.value}")

# anchor selection ranks expelled tokens (plus sitting anchors) by score,
# younger frame first on ties, and keeps the best two; the rest are the
# tokens the temporal cache is done with -- they exit toward the voxel store
expelled[0].score = 5.0  # make one expelled token clearly worth keeping
losers = cache.select_anchors(expelled)
print("\nanchors kept:", [tuple(t.id) for t in cache.snapshot()[cache.reference_count + cache.window_token_count:]])
print("evicted toward the spatial cache:", [tuple(t.id) for t in losers])
