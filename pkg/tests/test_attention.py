"""Attention engine against a triple-loop oracle, plus the count bias."""

import numpy as np
import pytest

from stacache import (
    AttentionMask,
    DimensionError,
    EmptySupportError,
    attend,
    build_chunk_mask,
)
from oracles import naive_attend


def _random_instance(rng, n_q=None, n_k=None, d=None):
    n_q = n_q or int(rng.integers(1, 8))
    n_k = n_k or int(rng.integers(1, 12))
    d = d or int(rng.integers(1, 9))
    q = rng.normal(size=(n_q, d))
    k = rng.normal(size=(n_k, d))
    v = rng.normal(size=(n_k, d))
    counts = rng.integers(1, 6, size=n_k).astype(float)
    return q, k, v, counts, d


def test_attend_matches_naive_oracle():
    rng = np.random.default_rng(21)
    for _ in range(60):
        q, k, v, counts, d = _random_instance(rng)
        mask = AttentionMask(np.ones((q.shape[0], k.shape[0]), dtype=bool))
        res = attend(q, k, v, counts, mask, d)
        ref_out, ref_mass = naive_attend(q, k, v, counts, mask.allowed, d)
        assert np.allclose(res.outputs, ref_out, atol=1e-12)
        assert np.allclose(res.mass, ref_mass, atol=1e-12)


def test_attend_matches_oracle_under_partial_masks():
    rng = np.random.default_rng(22)
    for _ in range(60):
        q, k, v, counts, d = _random_instance(rng)
        allowed = rng.random((q.shape[0], k.shape[0])) < 0.7
        for i in range(q.shape[0]):
            if not allowed[i].any():
                allowed[i, rng.integers(0, k.shape[0])] = True
        res = attend(q, k, v, counts, AttentionMask(allowed), d)
        ref_out, ref_mass = naive_attend(q, k, v, counts, allowed, d)
        assert np.allclose(res.outputs, ref_out, atol=1e-12)
        assert np.allclose(res.mass, ref_mass, atol=1e-12)
        # masked keys receive exactly zero mass per query, so a fully
        # masked key column has zero total mass
        dead = ~allowed.any(axis=0)
        assert (res.mass[dead] == 0.0).all()


def test_count_bias_equals_duplication():
    # One representative with count n must attend exactly like n copies.
    rng = np.random.default_rng(23)
    for _ in range(40):
        d = int(rng.integers(2, 10))
        n = int(rng.integers(1, 9))
        q = rng.normal(size=(3, d))
        base_k = rng.normal(size=(4, d))
        base_v = rng.normal(size=(4, d))
        rep_k = rng.normal(size=d)
        rep_v = rng.normal(size=d)

        dup_k = np.vstack([base_k] + [rep_k] * n)
        dup_v = np.vstack([base_v] + [rep_v] * n)
        dup = attend(q, dup_k, dup_v, np.ones(4 + n), _all_true(3, 4 + n), d)

        rep_keys = np.vstack([base_k, rep_k])
        rep_vals = np.vstack([base_v, rep_v])
        counts = np.array([1.0] * 4 + [float(n)])
        rep = attend(q, rep_keys, rep_vals, counts, _all_true(3, 5), d)

        assert np.allclose(rep.outputs, dup.outputs, atol=1e-9)
        # the representative's mass equals the sum over the duplicates
        assert rep.mass[-1] == pytest.approx(dup.mass[4:].sum(), abs=1e-9)


def _all_true(n_q, n_k):
    return AttentionMask(np.ones((n_q, n_k), dtype=bool))


def test_mass_sums_to_query_count():
    rng = np.random.default_rng(24)
    q, k, v, counts, d = _random_instance(rng, n_q=7, n_k=11)
    res = attend(q, k, v, counts, _all_true(7, 11), d)
    assert res.mass.sum() == pytest.approx(7.0, abs=1e-9)
    assert (res.mass >= 0.0).all()


def test_attend_is_stable_for_large_logits():
    d = 4
    q = np.full((2, d), 50.0)
    k = np.vstack([np.full(d, 50.0), -np.full(d, 50.0)])
    v = np.eye(2, d)
    res = attend(q, k, v, np.ones(2), _all_true(2, 2), d)
    assert np.isfinite(res.outputs).all()
    # the aligned key takes essentially all the weight
    assert np.allclose(res.outputs, np.tile(v[0], (2, 1)), atol=1e-12)


def test_build_chunk_mask_shape_and_content():
    m = build_chunk_mask(10, 4)
    assert m.shape == (4, 14)
    assert m.allowed.all()
    m = build_chunk_mask(0, 3)
    assert m.shape == (3, 3)
    with pytest.raises(DimensionError):
        build_chunk_mask(-1, 3)
    with pytest.raises(DimensionError):
        build_chunk_mask(5, 0)


def test_attend_error_paths():
    d = 3
    q = np.zeros((2, d))
    k = np.zeros((4, d))
    v = np.zeros((4, d))
    ones = np.ones(4)
    with pytest.raises(EmptySupportError):
        attend(q, np.zeros((0, d)), np.zeros((0, d)), np.zeros(0), _all_true(2, 0), d)
    with pytest.raises(DimensionError):
        attend(q, np.zeros((4, d + 1)), v, ones, _all_true(2, 4), d)
    with pytest.raises(DimensionError):
        attend(q, k, np.zeros((3, d)), ones, _all_true(2, 4), d)
    with pytest.raises(DimensionError):
        attend(q, k, v, np.ones(3), _all_true(2, 4), d)
    with pytest.raises(DimensionError):
        attend(q, k, v, np.full(4, 0.5), _all_true(2, 4), d)  # counts below 1
    with pytest.raises(DimensionError):
        attend(q, k, v, ones, _all_true(3, 4), d)  # mask rows mismatch
    bad = np.ones((2, 4), dtype=bool)
    bad[1] = False
    with pytest.raises(EmptySupportError):
        attend(q, k, v, ones, AttentionMask(bad), d)
