import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridattn.attention import (
    AttentionHeadState,
    ExactTerms,
    exact_terms,
    exact_terms_from_scores,
    full_attention,
    make_partition,
    scores,
    selection_only_output,
    subset_bias_decomposition,
    topk_select,
)
from hybridattn.numerics import seeded_rng


def _brute_attention(q, keys, values):
    d = len(q)
    s = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in keys]
    w = [math.exp(x) for x in s]
    z = sum(w)
    return [sum(wi * v[j] for wi, v in zip(w, values)) / z for j in range(len(values[0]))]


def _random_state(rng, n, d):
    return AttentionHeadState(rng.standard_normal((n, d)), rng.standard_normal((n, d)))


Q3 = np.array([0.3, -1.2])
K3 = np.array([[1.0, 0.5], [-0.7, 2.0], [0.25, 0.25]])
V3 = np.array([[1.0, -1.0], [0.5, 2.0], [-3.0, 0.0]])


def test_state_validation():
    with pytest.raises(ValueError):
        AttentionHeadState(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        AttentionHeadState(np.zeros((0, 2)), np.zeros((0, 2)))
    s = AttentionHeadState(np.zeros((3, 2)), np.ones((3, 2)))
    assert (s.n, s.d_h) == (3, 2)


def test_scores_examples():
    e0 = np.array([1.0, 0, 0, 0])
    state = AttentionHeadState(np.stack([e0, [0, 1.0, 0, 0]]), np.zeros((2, 4)))
    np.testing.assert_array_equal(scores(e0, state), [0.5, 0.0])
    st3 = AttentionHeadState(K3, V3)
    np.testing.assert_allclose(
        scores(Q3, st3), [-0.21213203435596424947, -1.8455486988968889704, -0.1590990257669731871], rtol=1e-14
    )
    np.testing.assert_allclose(scores(Q3, st3, [2, 0]), scores(Q3, st3)[[2, 0]])
    with pytest.raises(IndexError):
        scores(Q3, st3, [3])
    with pytest.raises(IndexError):
        scores(Q3, st3, [-1])


def test_full_attention_examples():
    one = AttentionHeadState(np.array([[5.0, -2.0]]), np.array([[0.25, 4.0]]))
    np.testing.assert_array_equal(full_attention(np.array([3.0, 1.0]), one), [0.25, 4.0])
    flat = AttentionHeadState(np.zeros((4, 2)), np.arange(8.0).reshape(4, 2))
    np.testing.assert_allclose(full_attention(np.array([1.0, 1.0]), flat), [3.0, 4.0])
    np.testing.assert_allclose(
        full_attention(Q3, AttentionHeadState(K3, V3)), [-0.91822868408864265638, -0.27091187476700839052], rtol=1e-14
    )


def test_full_attention_matches_brute_force():
    rng = seeded_rng(7)
    for _ in range(20):
        n, d = rng.integers(1, 12), rng.integers(1, 6)
        st_ = _random_state(rng, n, d)
        q = rng.standard_normal(d)
        np.testing.assert_allclose(full_attention(q, st_), _brute_attention(q, st_.keys, st_.values), rtol=1e-12, atol=1e-14)


def test_make_partition_examples():
    p = make_partition(10, 2, 3)
    assert p.anchors.tolist() == [0, 1, 7, 8, 9]
    assert p.mid.tolist() == [2, 3, 4, 5, 6]
    p0 = make_partition(6, 0, 0)
    assert p0.anchors.size == 0 and p0.mid.tolist() == list(range(6))
    pe = make_partition(5, 2, 3)
    assert pe.mid.size == 0 and pe.mid_size == 0
    with pytest.raises(ValueError):
        make_partition(5, 3, 3)


@given(st.integers(1, 200), st.data())
def test_partition_covers_everything(n, data):
    n_sink = data.draw(st.integers(0, n))
    n_tail = data.draw(st.integers(0, n - n_sink))
    p = make_partition(n, n_sink, n_tail)
    a, m = set(p.anchors.tolist()), set(p.mid.tolist())
    assert a | m == set(range(n)) and not a & m
    assert p.mid.tolist() == list(range(n_sink, n - n_tail))
    assert p.in_mid(p.mid).all() and not p.in_mid(p.anchors).any()


def _inject_mid_scores(mid_scores, n_sink=1, n_tail=1):
    """State whose mid scores for q = e_0 (d_h = 1) equal ``mid_scores``."""
    s = np.concatenate([[0.0] * n_sink, mid_scores, [0.0] * n_tail])
    return AttentionHeadState(s[:, None], np.zeros((s.size, 1))), make_partition(s.size, n_sink, n_tail)


def test_topk_examples():
    state, part = _inject_mid_scores([0.5, 2.0, -1.0, 2.0])
    q = np.array([1.0])
    # sort-based oracle: key (-score, index)
    mid_scores = [0.5, 2.0, -1.0, 2.0]
    oracle = sorted(range(4), key=lambda i: (-mid_scores[i], i))[:2]
    assert topk_select(q, state, part, 2).tolist() == [1 + i for i in oracle] == [2, 4]
    assert topk_select(q, state, part, 0).size == 0
    assert sorted(topk_select(q, state, part, 4).tolist()) == part.mid.tolist()
    with pytest.raises(ValueError):
        topk_select(q, state, part, 5)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40), st.data())
def test_topk_invariants(seed, n, data):
    rng = seeded_rng(seed)
    # coarse scores force plenty of ties
    keys = rng.integers(-3, 4, size=(n, 1)).astype(float)
    state = AttentionHeadState(keys, np.zeros((n, 1)))
    part = make_partition(n, 1, 1)
    k = data.draw(st.integers(0, part.mid_size))
    sel = topk_select(np.array([1.0]), state, part, k)
    assert sel.size == k == np.unique(sel).size
    assert part.in_mid(sel).all()
    s = keys[:, 0]
    rest = np.setdiff1d(part.mid, sel)
    if k and rest.size:
        assert s[sel].min() >= s[rest].max()
        # among tied boundary scores the smaller indices were taken
        edge = s[sel].min()
        tied_rest = rest[s[rest] == edge]
        if tied_rest.size:
            assert sel[s[sel] == edge].max() < tied_rest.min()


def test_exact_terms_examples():
    q = np.array([1.5, -0.5])
    keys = np.array([[0.2, 0.1], [1.0, -1.0], [-0.5, 0.3], [2.0, 0.0], [0.0, 0.0]])
    vals = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -2.0], [-1.0, 3.0], [9.0, 9.0]])
    state = AttentionHeadState(keys, vals)
    et = exact_terms(q, state, [0, 1, 2, 3])
    assert et.z == pytest.approx(14.177955834673591971, rel=1e-14)
    np.testing.assert_allclose(et.numerator, [-6.0903878170970091697, 28.081292208281478616], rtol=1e-14)
    single = exact_terms(q, state, [3])
    s3 = 3.0 / math.sqrt(2)
    assert single.z == pytest.approx(math.exp(s3), rel=1e-15)
    np.testing.assert_allclose(single.numerator, math.exp(s3) * vals[3], rtol=1e-15)
    np.testing.assert_allclose(exact_terms(q, state, range(5)).y, full_attention(q, state), rtol=1e-12)
    with pytest.raises(ValueError):
        exact_terms(q, state, [])


def test_exact_terms_large_scores_stay_finite():
    s = np.array([700.0, 699.0, 650.0])
    v = np.array([[1.0], [2.0], [3.0]])
    et = exact_terms_from_scores(s, v)
    assert np.isfinite(et.z) and np.all(np.isfinite(et.numerator))
    assert et.log_z == pytest.approx(700 + math.log(1 + math.exp(-1) + math.exp(-50)), rel=1e-15)
    with np.errstate(over="ignore"):
        assert not np.isfinite(np.exp(s + 10).sum())  # naive path at slightly larger scores overflows


@given(st.integers(0, 2**32 - 1))
def test_exact_terms_match_naive_on_small_scores(seed):
    rng = seeded_rng(seed)
    s = rng.uniform(-5, 5, size=int(rng.integers(1, 30)))
    v = rng.standard_normal((s.size, 3))
    et = exact_terms_from_scores(s, v)
    w = np.exp(s)
    assert et.z == pytest.approx(w.sum(), rel=1e-12)
    np.testing.assert_allclose(et.numerator, w @ v, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(-500, 500))
def test_output_is_shift_invariant(seed, c):
    rng = seeded_rng(seed)
    s = rng.standard_normal(16) * 3
    v = rng.standard_normal((16, 4))
    np.testing.assert_allclose(exact_terms_from_scores(s + c, v).y, exact_terms_from_scores(s, v).y, rtol=1e-10, atol=1e-12)


def test_selection_only_output():
    rng = seeded_rng(3)
    state = _random_state(rng, 9, 3)
    q = rng.standard_normal(3)
    np.testing.assert_allclose(selection_only_output(exact_terms(q, state, range(9))), full_attention(q, state), rtol=1e-12)
    np.testing.assert_allclose(selection_only_output(exact_terms(q, state, [4])), state.values[4], rtol=1e-15)
    with pytest.raises(ValueError):
        selection_only_output(ExactTerms.empty(3))


def test_subset_bias_two_token_fixture():
    state = AttentionHeadState(np.array([[0.5], [-1.0]]), np.array([[3.0], [-2.0]]))
    sb = subset_bias_decomposition(np.array([2.0]), state, [0])
    assert sb.gap[0] == pytest.approx(-0.23712936588783390439, rel=1e-13)
    assert sb.predicted_gap[0] == pytest.approx(-0.23712936588783390439, rel=1e-13)
    assert sb.residual < 1e-12


def test_subset_bias_full_complement_is_exact():
    rng = seeded_rng(11)
    state = _random_state(rng, 6, 2)
    sb = subset_bias_decomposition(rng.standard_normal(2), state, range(6))
    assert sb.z_r == 0.0 and sb.y_r is None
    np.testing.assert_array_equal(sb.y_full, sb.y_sel)
    np.testing.assert_array_equal(sb.gap, np.zeros(2))


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_subset_bias_identity_random(seed):
    rng = seeded_rng(seed)
    n, d = int(rng.integers(2, 65)), int(rng.integers(1, 17))
    state = _random_state(rng, n, d)
    q = rng.standard_normal(d) * 2
    subset = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
    assert subset_bias_decomposition(q, state, subset).residual < 1e-10
