import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fp8train.numerics import E4M3, E5M2, decode_array
from fp8train.scaling import (
    AmaxHistory,
    ChannelScales,
    ScalingError,
    amax,
    channel_amax,
    delayed_scale,
    dequantize,
    fake_quantize,
    jit_scale,
    per_channel_scales,
    quantize,
    scale_from_amax,
    update_history,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


# ── amax history ─────────────────────────────────────────────────────────


def test_history_keeps_last_capacity_values():
    h = AmaxHistory(capacity=3)
    for a in (1.0, 5.0, 2.0, 3.0):
        update_history(h, a)
    assert h.values == [5.0, 2.0, 3.0]
    assert h.effective_amax() == 5.0


def test_history_most_recent_reduction():
    h = AmaxHistory(capacity=4, reduction="most_recent")
    for a in (9.0, 1.0):
        update_history(h, a)
    assert h.effective_amax() == 1.0


def test_history_rejects_bad_input():
    with pytest.raises(ScalingError):
        AmaxHistory(capacity=0)
    with pytest.raises(ScalingError):
        AmaxHistory(reduction="mean")
    h = AmaxHistory()
    with pytest.raises(ScalingError):
        h.effective_amax()
    for bad in (math.nan, math.inf, -1.0):
        with pytest.raises(ScalingError):
            update_history(h, bad)


def test_delayed_scale_uses_history_not_current_tensor():
    h = AmaxHistory(capacity=16)
    update_history(h, 4.0)
    s = delayed_scale(h, E4M3)
    assert s == 448.0 / 4.0
    # a larger current tensor saturates under the stale scale
    q = quantize(np.array([4.0, 40.0]), s, E4M3)
    assert q.saturated == 1


@given(st.floats(1e-30, 1e30), st.floats(0.01, 1.0))
def test_scale_maps_amax_within_target(a, margin):
    for fmt in (E4M3, E5M2):
        s = scale_from_amax(a, fmt, margin)
        assert s * a <= margin * fmt.max_normal
        # and sits within two ulps of the exact quotient
        assert abs(s - margin * fmt.max_normal / a) <= 2 * math.ulp(s)


def test_scale_of_zero_tensor_is_one():
    assert scale_from_amax(0.0, E4M3, 1.0) == 1.0
    assert jit_scale(np.zeros(5), E4M3) == 1.0


@pytest.mark.parametrize("margin", [0.0, -0.5, 1.5])
def test_margin_must_be_in_unit_interval(margin):
    with pytest.raises(ScalingError):
        scale_from_amax(1.0, E4M3, margin)


def test_amax_and_jit_reject_nonfinite():
    assert amax(np.array([-3.0, 2.0])) == 3.0
    with pytest.raises(ScalingError):
        jit_scale(np.array([1.0, math.nan]), E4M3)


# ── per-tensor quantization ──────────────────────────────────────────────


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite))
def test_jit_scale_never_saturates(t):
    for fmt in (E4M3, E5M2):
        q = quantize(t, jit_scale(t, fmt), fmt)
        assert q.saturated == 0


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite))
def test_fake_quantize_matches_quantize_dequantize(t):
    s = jit_scale(t, E4M3)
    assert np.array_equal(fake_quantize(t, s, E4M3).values, dequantize(quantize(t, s, E4M3)))


def test_quantize_is_encode_of_scaled_tensor():
    t = np.array([0.1, -2.5, 7.0])
    q = quantize(t, 16.0, E4M3)
    assert np.array_equal(decode_array(q.codes, E4M3), np.array([1.625, -40.0, 112.0]))
    assert np.array_equal(q.dequantize(), np.array([1.625, -40.0, 112.0]) / 16.0)


def test_quantize_rejects_bad_scale():
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ScalingError):
            quantize(np.ones(2), bad, E4M3)


def test_scaled_tensor_nbytes():
    q = quantize(np.ones((4, 8)), 1.0, E4M3)
    assert q.nbytes == 32 + 4


# ── per-channel scaling ──────────────────────────────────────────────────


def test_channel_scales_validation():
    with pytest.raises(ScalingError):
        ChannelScales(np.array([1.0, 0.0]))
    with pytest.raises(ScalingError):
        ChannelScales(np.array([]))
    with pytest.raises(ScalingError):
        ChannelScales(np.array([[1.0]]))


@settings(max_examples=40)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 12)), elements=finite))
def test_per_channel_scales_are_saturation_free(t):
    cs = per_channel_scales(t, E4M3)
    q = quantize(t, cs, E4M3)
    assert q.saturated == 0
    cmax = np.max(np.abs(t), axis=0)
    assert np.all(cs.s * cmax <= E4M3.max_normal)


def test_per_channel_scale_maps_each_channel_max_to_max_normal():
    t = np.array([[1.0, -8.0], [-4.0, 2.0]])
    cs = per_channel_scales(t, E4M3)
    assert np.array_equal(cs.s, [112.0, 56.0])


def test_zero_channel_gets_unit_scale_and_clamp_applies():
    t = np.array([[0.0, 1e-40], [0.0, 0.0]])
    cs = per_channel_scales(t, E4M3, clamp=(2.0**-30, 2.0**30))
    assert cs.s[0] == 1.0
    assert cs.s[1] == 2.0**30


@pytest.mark.parametrize("workers", [1, 2, 3, 8])
def test_channel_amax_independent_of_workers(workers):
    t = np.random.default_rng(0).standard_normal((50, 37))
    assert np.array_equal(channel_amax(t, workers), np.max(np.abs(t), axis=0))


def test_channel_amax_shape_errors():
    with pytest.raises(ScalingError):
        channel_amax(np.ones(3))
    assert np.array_equal(channel_amax(np.ones((0, 4))), np.zeros(4))
