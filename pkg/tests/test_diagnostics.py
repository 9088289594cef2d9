import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fp8train.diagnostics import (
    CSV_COLUMNS,
    DiagnosticsRecord,
    amax_series,
    channel_correlation,
    channel_correlations,
    detect_outlier_channels,
    input_magnitude_histogram,
    record_amax,
    record_channels,
    record_tensor,
    write_diagnostics_csv,
    write_histogram_csv,
)
from fp8train.nn import TensorStats

vec = hnp.arrays(np.float64, 5, elements=st.floats(-1e3, 1e3))


# ── alignment ────────────────────────────────────────────────────────────


def test_correlation_examples():
    assert channel_correlation([1, 0], [2, 0]) == 1.0
    assert channel_correlation([1, 0], [-3, 0]) == -1.0
    assert channel_correlation([1, 0], [0, 5]) == 0.0
    assert channel_correlation([0, 0], [1, 1]) == 0.0
    assert math.isclose(channel_correlation([1, 1], [1, 0]), 1 / math.sqrt(2), rel_tol=1e-15)
    with pytest.raises(ValueError):
        channel_correlation([1, 2], [1, 2, 3])


@settings(max_examples=80)
@given(vec, vec, st.floats(0.01, 100))
def test_correlation_bounded_symmetric_scale_invariant(a, b, k):
    c = channel_correlation(a, b)
    assert -1.0 <= c <= 1.0
    assert c == channel_correlation(b, a)
    if np.linalg.norm(a) > 1e-100 and np.linalg.norm(b) > 1e-100:
        assert math.isclose(channel_correlation(k * a, b), c, rel_tol=1e-9, abs_tol=1e-12)


def test_vectorized_correlations_match_scalar():
    rng = np.random.default_rng(0)
    w1, w2 = rng.standard_normal((6, 9)), rng.standard_normal((6, 9))
    w1[:, 3] = 0
    cos, n1, n2 = channel_correlations(w1, w2)
    for i in range(9):
        assert math.isclose(cos[i], channel_correlation(w1[:, i], w2[:, i]), rel_tol=1e-12, abs_tol=1e-15)
    np.testing.assert_allclose(n1, np.linalg.norm(w1, axis=0))
    with pytest.raises(ValueError):
        channel_correlations(w1, w2[:, :3])


def test_record_channels():
    rec = record_channels(DiagnosticsRecord(0), "mlp", np.eye(2), np.array([[1.0, 0.0], [0.0, -2.0]]))
    assert rec.per_channel[("mlp", 0)].cos_w1w2 == 1.0
    assert rec.per_channel[("mlp", 1)].cos_w1w2 == -1.0
    assert rec.per_channel[("mlp", 1)].norm_w2 == 2.0


# ── amax ─────────────────────────────────────────────────────────────────


def test_record_amax_and_divergence():
    rec = DiagnosticsRecord(3)
    record_amax(rec, "a", np.array([[1.0, -4.0], [2.0, 0.5]]), channel_axis=1)
    assert rec.per_layer_amax["a"] == 4.0
    assert np.array_equal(rec.channel_amax["a"], [2.0, 4.0])
    record_amax(rec, "b", np.array([1.0, np.inf]))
    assert "b" in rec.diverged and "b" not in rec.per_layer_amax


def test_amax_series_skips_missing():
    recs = [DiagnosticsRecord(i) for i in range(4)]
    for i in (0, 2, 3):
        record_amax(recs[i], "l", np.array([float(i + 1)]))
    its, vals = amax_series(recs, "l")
    assert its.tolist() == [0, 2, 3] and vals.tolist() == [1.0, 3.0, 4.0]


def test_record_tensor_copies_stats():
    rec = record_tensor(DiagnosticsRecord(0), "mlp.u", TensorStats(5.0, 4.0, 2.0, 3, 1, False))
    t = rec.tensors["mlp.u"]
    assert (t.amax, t.amax_post, t.scale, t.saturations, t.underflows) == (5.0, 4.0, 2.0, 3, 1)
    assert rec.saturation_counts == {"mlp.u": 3}
    rec = record_tensor(rec, "mlp.x", TensorStats(nonfinite=True))
    assert "mlp.x" in rec.diverged


# ── histogram ────────────────────────────────────────────────────────────


def test_histogram_counts_every_token_once():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 4))
    x[0] = 0.0
    x[1] = 1e9
    h = input_magnitude_histogram(x, np.ones(4))
    assert h.total == 500
    assert h.counts[0] >= 1 and h.counts[-1] >= 1
    mag = np.abs(x @ np.ones(4))
    assert h.frac_below_1 == np.mean(mag < 1)
    assert h.frac_below_e == np.mean(mag < math.e)


def test_histogram_known_bins():
    x = np.array([[math.exp(0.5)], [math.exp(-0.5)], [math.exp(1.5)]])
    h = input_magnitude_histogram(x, np.array([1.0]), bins=np.array([-1.0, 0.0, 1.0, 2.0]))
    assert h.counts.tolist() == [1, 1, 1]
    assert h.frac_below_1 == pytest.approx(1 / 3)


def test_histogram_rejects_empty():
    with pytest.raises(ValueError):
        input_magnitude_histogram(np.zeros((0, 3)), np.ones(3))


# ── outlier detection ────────────────────────────────────────────────────


def _series(spike_channel, cos_value, n=10, h=4):
    recs = []
    for it in range(n):
        r = DiagnosticsRecord(it)
        a = np.ones(h)
        if it == n - 1:
            a[spike_channel] = 50.0
        r.channel_amax["mlp.u"] = a
        w1 = np.eye(h)
        w2 = np.eye(h)
        w2[:, spike_channel] = cos_value * w1[:, spike_channel] + math.sqrt(1 - cos_value**2) * np.roll(
            w1[:, spike_channel], 1)
        record_channels(r, "mlp.u", w1, w2)
        recs.append(r)
    return recs


def test_detects_spiking_aligned_channel():
    assert detect_outlier_channels(_series(2, 0.99), "mlp.u") == {2}


def test_ignores_spiking_unaligned_channel():
    assert detect_outlier_channels(_series(2, 0.3), "mlp.u") == set()


def test_ignores_aligned_channel_below_ratio():
    assert detect_outlier_channels(_series(1, 0.99), "mlp.u", amax_ratio_threshold=100.0) == set()
    with pytest.raises(ValueError):
        detect_outlier_channels([], "mlp.u")


# ── CSV ──────────────────────────────────────────────────────────────────


def test_csv_round_trips_floats(tmp_path):
    rec = DiagnosticsRecord(7)
    record_channels(rec, "mlp0.u", np.array([[0.1, 0.2]]), np.array([[0.3, -0.7]]))
    rec.channel_amax["mlp0.u"] = np.array([1 / 3, 2 / 3])
    rec.per_layer_amax["mlp0.u"] = 2 / 3
    record_tensor(rec, "mlp0.x", TensorStats(0.1, 0.1, 4480.0, 2, 1, False))
    path = write_diagnostics_csv([rec], tmp_path / "d.csv")
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    chan = [r for r in rows if r["tensor"] == "channel"]
    assert float(chan[0]["amax"]) == 1 / 3
    tens = [r for r in rows if r["tensor"] == "x"][0]
    assert tens["channel"] == "-1" and tens["saturations"] == "2" and float(tens["scale"]) == 4480.0


def test_histogram_csv(tmp_path):
    h = input_magnitude_histogram(np.ones((3, 1)), np.ones(1), bins=np.array([-1.0, 0.0, 1.0]))
    rows = list(csv.reader(write_histogram_csv(h, tmp_path / "h.csv").open()))
    assert rows[0] == ["ln_lo", "ln_hi", "count"]
    assert [int(r[2]) for r in rows[1:]] == [0, 3]
