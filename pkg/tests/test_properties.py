"""Property tests for invariants that must hold for every input."""
import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from layerprobe import tensor as T
from layerprobe.errors import ConfigurationError
from layerprobe.analysis import build_report, compute_thresholds, mark_compromised
from layerprobe.explain import cosine_similarity, heatmap_from_maps, resize_bilinear
from layerprobe.model import ActivationCapture
from layerprobe.perturbation import (
    CoverageState,
    amplify,
    compose_inputs,
    decode_array,
    encode_array,
    match_gaussian_noise,
    update_coverage,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)
unit = st.floats(0, 1, allow_nan=False, width=32)


def grids(min_side=1, max_side=6, elements=finite):
    return st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=elements))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), k=st.integers(1, 4), stride=st.integers(1, 3),
       pad=st.integers(0, 2), cin=st.integers(1, 3), cout=st.integers(1, 3))
def test_conv_output_shape(h, w, k, stride, pad, cin, cout):
    assume(h + 2 * pad >= k and w + 2 * pad >= k)
    args = [T.as_tensor(np.zeros(s, np.float32)) for s in ((2, cin, h, w), (cout, cin, k, k), (cout,))]
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        with pytest.raises(ConfigurationError):
            T.conv2d(*args, stride, pad)
        return
    out = T.conv2d(*args, stride, pad)
    assert out.shape == (2, cout, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_cosine_symmetric_bounded_scale_invariant(data):
    a = data.draw(grids())
    b = data.draw(arrays(np.float64, a.shape, elements=finite))
    c = data.draw(st.floats(0.01, 100))
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    if np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3:
        assert abs(cosine_similarity(c * a, b) - s) < 1e-9


@settings(max_examples=60, deadline=None)
@given(data=st.data(), factor=st.floats(0.01, 100))
def test_heatmap_range_and_gradient_scale(data, factor):
    shape = (data.draw(st.integers(1, 3)), data.draw(st.integers(1, 5)), data.draw(st.integers(1, 5)))
    fm = data.draw(arrays(np.float64, shape, elements=st.floats(0, 5)))
    g = data.draw(arrays(np.float64, shape, elements=finite))
    dims = (data.draw(st.integers(1, 9)), data.draw(st.integers(1, 9)))
    h = heatmap_from_maps("l", fm, g, dims)
    assert h.grid.shape == dims
    assert h.grid.min() >= 0 and h.grid.max() <= 1
    assert h.grid.max() == 1.0 or not h.grid.any()
    scaled = heatmap_from_maps("l", fm, factor * g, dims)
    np.testing.assert_allclose(scaled.grid, h.grid, atol=1e-7)


@settings(max_examples=80, deadline=None)
@given(src=grids(elements=st.floats(-5, 5)), oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_resize_stays_within_source_range(src, oh, ow):
    out = resize_bilinear(src, (oh, ow))
    assert out.shape == (oh, ow)
    assert out.min() >= src.min() - 1e-12 and out.max() <= src.max() + 1e-12


@settings(max_examples=80, deadline=None)
@given(steps=st.lists(arrays(np.float32, 6, elements=unit), min_size=1, max_size=6),
       t=st.floats(0, 0.9))
def test_coverage_is_monotone(steps, t):
    cov = CoverageState(6, threshold=t)
    prev_flags, prev = cov.fired.copy(), cov.ratio
    for values in steps:
        update_coverage(cov, ActivationCapture(neurons=values, layer_slices={"a": slice(0, 6)}))
        assert cov.ratio >= prev and (cov.fired >= prev_flags).all()
        prev_flags, prev = cov.fired.copy(), cov.ratio


@settings(max_examples=60, deadline=None)
@given(flags=st.lists(arrays(np.bool_, 5), min_size=1, max_size=5), seed=st.integers(0, 100))
def test_coverage_merge_order_independent(flags, seed):
    states = []
    for f in flags:
        s = CoverageState(5)
        s.fired[:] = f
        s.fire_counts[:] = f
        states.append(s)
    def fold(order):
        acc = CoverageState(5)
        for s in order:
            acc = acc.merge(s)
        return acc
    shuffled = list(states)
    random.Random(seed).shuffle(shuffled)
    a, b = fold(states), fold(shuffled)
    assert (a.fired == b.fired).all() and (a.fire_counts == b.fire_counts).all()


@settings(max_examples=60, deadline=None)
@given(n_a=arrays(np.float32, st.integers(1, 40), elements=st.floats(-0.125, 0.125, width=32)),
       seed=st.integers(0, 2**31), ratio=st.sampled_from([0.25, 0.5, 1.0, 2.0, 4.0]))
def test_noise_shape_and_amplification(n_a, seed, ratio):
    n_g = match_gaussian_noise(n_a, seed)
    assert n_g.shape == n_a.shape and n_g.dtype == np.float32
    np.testing.assert_array_equal(n_g, match_gaussian_noise(n_a, seed))
    np.testing.assert_allclose(amplify(n_g, ratio), np.float32(ratio) * n_g)
    triple = compose_inputs(n_a * 0 + 0.5, n_a, n_g, ratio)
    for img in (triple.seed, triple.adversarial, triple.noisy):
        assert img.min() >= 0 and img.max() <= 1


@settings(max_examples=60, deadline=None)
@given(arr=arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_array_encoding_round_trip(arr):
    out = decode_array(encode_array(arr))
    assert out.dtype == np.float32 and out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_corpus_statistics_invariants(seed):
    rnd = random.Random(seed)
    recs, layers, strengths = oracles.random_records(rnd)
    report = build_report(recs, layers)
    thr = compute_thresholds(recs)
    for s in strengths:
        group = [r for r in recs if r.strength == s]
        assert sum(report.histograms[s].bins) == len(group)
        for layer in layers:
            hits = sum(mark_compromised(r, thr, use_noise=True).compromised[layer] for r in group)
            assert hits <= -(-len(group) // 2)
    assert sorted(report.ranking) == sorted(layers)
    # result does not depend on record order
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert build_report(shuffled, layers).to_dict() == report.to_dict()
