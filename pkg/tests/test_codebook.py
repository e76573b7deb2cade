import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vqem import codebook as cbm
from vqem.codebook import Codebook, CodebookFormatError

import oracles


def make_cb(emb, counts=None, decay=0.999):
    return Codebook(np.asarray(emb, dtype=np.float64), counts, decay)


# --- distances -----------------------------------------------------------------


def test_distances_simple_cases():
    np.testing.assert_array_equal(cbm.pairwise_sq_distances([[0, 0]], make_cb([[0, 0], [3, 4]])), [[0, 25]])
    np.testing.assert_array_equal(cbm.pairwise_sq_distances([[1, 1]], make_cb([[1, 1]])), [[0]])


def test_distances_match_per_pair_subtraction():
    got = cbm.pairwise_sq_distances([[1, 2], [-1, 0]], make_cb([[0, 0], [1, 0]]))
    np.testing.assert_array_equal(got, [[5, 4], [1, 4]])


def test_distances_bitwise_equal_to_scalar_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 7))
    cb = make_cb(rng.standard_normal((9, 7)))
    table = cb.embeddings.astype(np.float64)
    np.testing.assert_array_equal(cbm.pairwise_sq_distances(x, cb), oracles.brute_distances(x, table))


def test_distances_reject_dimension_mismatch():
    with pytest.raises(ValueError):
        cbm.pairwise_sq_distances([[0.0, 1.0, 2.0]], make_cb([[0, 0]]))
    with pytest.raises(ValueError):
        cbm.nearest_code([[np.nan, 0.0]], make_cb([[0, 0]]))


# --- nearest code ----------------------------------------------------------------


def test_nearest_code_examples():
    cb = make_cb([[0], [1]])
    assert cbm.nearest_code([[0.2]], cb).tolist() == [0]
    assert cbm.nearest_code([[0.5]], cb).tolist() == [0]  # tie -> lowest index


def test_nearest_code_tie_among_duplicates_picks_first():
    cb = make_cb([[5.0, 5.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    assert cbm.nearest_code([[0.0, 0.0], [1.0, 0.0]], cb).tolist() == [1, 1]


def test_nearest_code_random_rows_match_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100, 8))
    cb = make_cb(rng.standard_normal((16, 8)))
    expect = oracles.brute_nearest(x, cb.embeddings.astype(np.float64))
    np.testing.assert_array_equal(cbm.nearest_code(x, cb), expect)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_nearest_code_property_against_double_loop(n, k, d, seed):
    rng = np.random.default_rng(seed)
    # small integer grids produce many exact ties
    x = rng.integers(-2, 3, (n, d)).astype(float)
    cb = make_cb(rng.integers(-2, 3, (k, d)).astype(float))
    np.testing.assert_array_equal(cbm.nearest_code(x, cb), oracles.brute_nearest(x, cb.embeddings))


# --- EMA update ------------------------------------------------------------------


def test_ema_count_example():
    cb = make_cb([[0.0]], [1.0], decay=0.5)
    out = cbm.ema_update(cb, [[2.0]], [[1.0]])
    assert out.ema_counts.tolist() == [1.0]
    # e' = 0.5 * 0 + 0.5 * 2 / 1
    assert out.embeddings.tolist() == [[1.0]]


def test_ema_with_zero_decay_is_batch_statistics():
    cb = make_cb([[9.0, 9.0], [-9.0, -9.0]], [3.0, 5.0], decay=0.0)
    x = np.array([[0.0, 1.0], [2.0, 3.0], [10.0, 10.0], [12.0, 14.0]])
    w = cbm.one_hot([0, 0, 1, 1], 2)
    out = cbm.ema_update(cb, x, w)
    np.testing.assert_array_equal(out.ema_counts, [2.0, 2.0])
    np.testing.assert_allclose(out.embeddings, [[1.0, 2.0], [11.0, 12.0]])


def test_ema_decay_one_freezes():
    rng = np.random.default_rng(1)
    cb = make_cb(rng.standard_normal((6, 3)), rng.uniform(0.5, 2, 6), decay=1.0)
    x = rng.standard_normal((20, 3))
    out = cbm.ema_update(cb, x, cbm.one_hot(cbm.nearest_code(x, cb), 6))
    assert out == cb


def test_ema_skips_codes_below_epsilon():
    cb = Codebook(np.array([[1.0], [4.0]]), np.array([0.0, 1.0]), decay=0.5)
    out = cbm.ema_update(cb, [[3.0]], [[0.0, 1.0]])
    assert out.embeddings[0, 0] == 1.0
    assert out.ema_counts[0] == 0.0


def test_ema_soft_weights_use_fractional_counts():
    cb = make_cb([[0.0], [0.0]], [1.0, 1.0], decay=0.5)
    out = cbm.ema_update(cb, [[4.0]], [[0.25, 0.75]])
    np.testing.assert_allclose(out.ema_counts, [0.625, 0.875])
    np.testing.assert_allclose(out.embeddings[:, 0], [0.5 * 1.0 / 0.625, 0.5 * 3.0 / 0.875], rtol=1e-6)


def test_ema_rejects_bad_weights():
    cb = make_cb([[0.0], [1.0]])
    with pytest.raises(ValueError):
        cbm.ema_update(cb, [[0.0]], [[-0.5, 1.5]])
    with pytest.raises(ValueError):
        cbm.ema_update(cb, [[0.0]], [[1.0]])
    with pytest.raises(ValueError):
        cbm.ema_update(cb, [[np.inf]], [[1.0, 0.0]])


def test_ema_overflow_raises_floating_point_error():
    # finite in float64, not representable in the float32 table
    cb = make_cb([[0.0]], [1.0], decay=0.5)
    with pytest.raises(FloatingPointError):
        cbm.ema_update(cb, [[1e300]], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, (12, 3), elements=st.floats(-50, 50)),
    st.floats(0.0, 1.0),
    st.integers(0, 2**32 - 1),
)
def test_ema_counts_are_convex_interpolation(x, lam, seed):
    rng = np.random.default_rng(seed)
    K = 4
    cb = make_cb(rng.standard_normal((K, 3)), rng.uniform(0, 10, K), decay=lam)
    w = rng.dirichlet(np.ones(K), size=12)
    out = cbm.ema_update(cb, x, w)
    old = cb.ema_counts.astype(np.float64)
    batch = w.sum(axis=0)
    lo, hi = np.minimum(old, batch), np.maximum(old, batch)
    tol = 1e-6 * (1 + hi)
    assert np.all(out.ema_counts >= lo - tol)
    assert np.all(out.ema_counts <= hi + tol)


# --- usage statistics ------------------------------------------------------------


@pytest.mark.parametrize(
    "assign,K,perp,dead",
    [([0, 0, 0, 0], 4, 1.0, 3), ([0, 1, 2, 3], 4, 4.0, 0), ([0, 0, 1, 1, 2, 2, 3, 3], 8, 4.0, 4)],
)
def test_usage_examples(assign, K, perp, dead):
    s = cbm.usage_stats(assign, K)
    assert s.usage_perplexity == pytest.approx(perp, rel=1e-12)
    assert s.dead_codes == dead


def test_usage_rejects_out_of_range():
    with pytest.raises(ValueError):
        cbm.usage_stats([0, 4], 4)
    with pytest.raises(ValueError):
        cbm.usage_stats([-1], 4)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 20).flatmap(lambda K: st.tuples(st.just(K), st.lists(st.integers(0, K - 1), min_size=1, max_size=60))))
def test_usage_invariants(case):
    K, assign = case
    s = cbm.usage_stats(assign, K)
    perp, dead = oracles.entropy_perplexity(assign, K)
    assert 1.0 <= s.usage_perplexity <= K
    assert s.usage_perplexity == pytest.approx(perp, rel=1e-9)
    assert s.dead_codes == dead
    assert s.dead_codes + np.count_nonzero(s.hit_counts) == K
    assert s.hit_counts.sum() == len(assign)


def test_usage_perplexity_reaches_K_only_when_uniform():
    assert cbm.usage_stats(list(range(5)) * 3, 5).usage_perplexity == pytest.approx(5.0)
    assert cbm.usage_stats(list(range(5)) * 3 + [0], 5).usage_perplexity < 5.0


# --- serialization ---------------------------------------------------------------


def test_roundtrip_bit_exact():
    rng = np.random.default_rng(7)
    emb = rng.standard_normal((5, 3))
    emb[0, 0] = -0.0
    cb = make_cb(emb, rng.uniform(0, 3, 5))
    back = cbm.deserialize(cbm.serialize(cb))
    assert back == cb
    assert cbm.serialize(back) == cbm.serialize(cb)


def test_header_layout():
    raw = cbm.serialize(make_cb(np.zeros((2, 3))))
    assert raw[:4] == b"VQCB"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 2
    assert int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 4 * 6 + 4 * 2


def test_large_table_size_and_roundtrip(tmp_path):
    K, D = 2**12, 512
    rng = np.random.default_rng(0)
    cb = make_cb(rng.standard_normal((K, D)).astype(np.float32))
    path = tmp_path / "big.vqcb"
    cbm.save(cb, path)
    assert path.stat().st_size == cbm.HEADER_SIZE + 4 * K * D + 4 * K
    assert cbm.load(path) == cb


def test_deserialize_errors():
    good = cbm.serialize(make_cb(np.ones((2, 2))))
    with pytest.raises(CodebookFormatError, match="magic"):
        cbm.deserialize(b"XXXX" + good[4:])
    with pytest.raises(CodebookFormatError, match="truncated"):
        cbm.deserialize(good[:-1])
    with pytest.raises(CodebookFormatError, match="truncated"):
        cbm.deserialize(good[:10])
    with pytest.raises(CodebookFormatError, match="oversized"):
        cbm.deserialize(good + b"\0")
    with pytest.raises(CodebookFormatError, match="version"):
        cbm.deserialize(good[:4] + (2).to_bytes(4, "little") + good[8:])
    huge = good[:8] + (2**40).to_bytes(8, "little") + (2**40).to_bytes(8, "little")
    with pytest.raises(CodebookFormatError, match="overflow"):
        cbm.deserialize(huge)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-65504.0, 65504.0, width=32)))
def test_roundtrip_property(emb):
    cb = Codebook(emb)
    assert cbm.deserialize(cbm.serialize(cb)) == cb


# --- construction ---------------------------------------------------------------


def test_from_data_samples_distinct_rows():
    data = np.arange(40, dtype=float).reshape(20, 2)
    cb = Codebook.from_data(data, 5, np.random.default_rng(0))
    rows = {tuple(r) for r in cb.embeddings.tolist()}
    assert len(rows) == 5
    assert rows <= {tuple(r) for r in data.tolist()}
    np.testing.assert_array_equal(cb.ema_counts, np.ones(5))


def test_from_data_falls_back_to_gaussian_when_short():
    cb = Codebook.from_data(np.zeros((2, 3)), 4, np.random.default_rng(0))
    assert cb.K == 4 and np.any(cb.embeddings != 0)


def test_constructor_validation():
    with pytest.raises(ValueError):
        Codebook(np.zeros(3))
    with pytest.raises(ValueError):
        Codebook(np.zeros((2, 2)), decay=1.5)
    with pytest.raises(ValueError):
        Codebook(np.zeros((2, 2)), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        Codebook(np.full((1, 1), math.inf))
