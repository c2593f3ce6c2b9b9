"""
The spatial voxel cache
=======================

Tokens evicted from the temporal cache land in a uniform voxel grid keyed
by Morton codes. Each cell holds a handful of merged long-term entries
plus a small arrival buffer; three mechanisms keep it bounded:

  one-to-one fusion    an arrival joins its most similar long-term entry
                       when cosine exceeds the merge threshold
  aggregation          a full buffer collapses into one representative,
                       weighted around its highest-score pivot
  re-merging           a full cell folds its lightest entry into that
                       entry's nearest neighbor to free the slot
"""

import numpy as np

from stacache import CachedToken, TokenId, VoxelStore, morton_decode, morton_encode, voxel_of

rng = np.random.default_rng(2)

# Morton codes order voxels along a space-filling curve: nearby cells
# usually share high bits, which keeps cell lookups cache-friendly
coord = voxel_of(np.array([0.26, 0.01, -0.07]), voxel_size=0.05)
code = morton_encode(coord)
print("position (0.26, 0.01, -0.07) -> voxel", coord, "-> code", code)
print("decode round-trips:", morton_decode(code) == coord)

store = VoxelStore(voxel_size=0.05, merge_lambda=0.8, g_cap=2, e_cap=3,
                   knn_radius_mult=2.0)


def evicted(i, key, pos, score=0.0):
    return CachedToken(id=TokenId(1, i), key=np.asarray(key, dtype=float),
                       value=rng.normal(size=4), score=score,
                       position=np.asarray(pos, dtype=float))


# three dissimilar arrivals in one voxel fill its buffer and aggregate
home = [0.01, 0.01, 0.01]
print("\nrouting events:")
print("  ", store.insert_evicted(evicted(0, [1, 0, 0, 0], home, score=1.0)))
print("  ", store.insert_evicted(evicted(1, [0, 1, 0, 0], home)))
print("  ", store.insert_evicted(evicted(2, [0, 0, 1, 0], home)))

cell = next(iter(store.cells.values()))
rep = cell.long_term[0]
print("aggregated entry: count =", rep.count, " weight Z =", round(rep.weight, 4),
      " origin =", rep.origin.value)

# a similar arrival now fuses one-to-one instead of buffering
print("\na near-duplicate of the pivot:", store.insert_evicted(
    evicted(3, [1, 0.05, 0, 0], home, score=0.5)))
print("entry after fusion: count =", rep.count, " weight Z =", round(rep.weight, 4))

# retrieval pulls tokens whose home voxel sits near anything currently
# visible: long-term entries first, then nearer cells, then heavier entries
for i in range(8):
    store.insert_evicted(evicted(10 + i, rng.normal(size=4),
                                 rng.uniform(-0.1, 0.1, size=3)))
visible = np.array([[0.0, 0.0, 0.0]])
got = store.retrieve(visible, quota=4)
print("\nretrieved near the origin:")
for t in got:
    print(f"  origin={t.origin.value:8s} count={t.count}  weight={t.weight:.3f}")
print("store occupancy:", store.occupancy(), "events:", store.events)
