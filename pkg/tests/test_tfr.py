import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepstager.errors import BundleError, FormatError, ShapeError
from sleepstager.tfr import (POWER_FLOOR, FilterBank, Standardizer, apply_filterbank,
                             build_tf_image, frame_count, hamming, make_triangular_filterbank,
                             read_tf_cache, recording_images, stft_log_power, write_tf_cache)

from conftest import make_bundle


def dft_log_power(x, win=200, hop=100, nfft=256):
    """Direct discrete Fourier sums, one frame and bin at a time."""
    n = np.arange(win)
    w = 0.54 - 0.46 * np.cos(2 * np.pi * n / (win - 1))
    frames = (len(x) - win) // hop + 1
    out = np.zeros((nfft // 2 + 1, frames))
    for t in range(frames):
        seg = x[t * hop:t * hop + win] * w
        for k in range(nfft // 2 + 1):
            z = np.sum(seg * np.exp(-2j * np.pi * k * n / nfft))
            out[k, t] = np.log(max(abs(z) ** 2, POWER_FLOOR))
    return out


def test_canonical_shape():
    s = stft_log_power(np.random.default_rng(0).standard_normal(3000))
    assert s.shape == (129, 29)
    assert np.all(np.isfinite(s))


def test_zero_epoch_hits_floor():
    s = stft_log_power(np.zeros(3000))
    assert np.all(s == np.log(POWER_FLOOR))


def test_sinusoid_matches_dft_oracle():
    t = np.arange(3000) / 100.0
    x = np.sin(2 * np.pi * 10.0 * t)
    s = stft_log_power(x)
    ref = dft_log_power(x)
    np.testing.assert_allclose(s, ref, rtol=1e-9, atol=0)
    peak = np.argmax(s, axis=0)
    assert np.all(peak == round(10 * 256 / 100))


def test_sinusoid_is_frame_stationary():
    t = np.arange(3000) / 100.0
    s = stft_log_power(np.sin(2 * np.pi * 17.3 * t + 0.4))
    peak = np.argmax(s[:, 1:-1], axis=0)
    assert len(set(peak.tolist())) == 1


def test_batch_matches_single():
    x = np.random.default_rng(1).standard_normal((4, 3000))
    batch = stft_log_power(x)
    for i in range(4):
        np.testing.assert_array_equal(batch[i], stft_log_power(x[i]))


def test_hamming_symmetric_form():
    w = hamming(200)
    assert w[0] == pytest.approx(0.08) and w[-1] == pytest.approx(0.08)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)


def test_epoch_too_short():
    with pytest.raises(ShapeError, match="too short"):
        stft_log_power(np.zeros(150))


@settings(max_examples=30, deadline=None)
@given(length=st.integers(200, 800), win=st.integers(16, 200), hop=st.integers(1, 120))
def test_frame_count_formula(length, win, hop):
    if hop > win:
        hop = win
    overlap = 1.0 - hop / win
    s = stft_log_power(np.ones(length), sample_rate_hz=1, win_s=win, overlap=overlap)
    real_hop = int(round(win * (1.0 - overlap)))
    assert real_hop == hop
    assert s.shape[1] == frame_count(length, win, hop) == (length - win) // hop + 1


# ---------------------------------------------------------------------------
# filter banks

def test_triangular_m20():
    fb = make_triangular_filterbank(20, 129)
    assert fb.weights.shape == (20, 129)
    np.testing.assert_allclose(fb.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(fb.weights >= 0)
    assert np.all(fb.weights.max(axis=1) > 0)


def test_triangular_rows_unimodal_with_linear_peaks():
    fb = make_triangular_filterbank(20, 129)
    peaks = np.argmax(fb.weights, axis=1)
    freqs = np.linspace(0, 50, 129)
    np.testing.assert_allclose(freqs[peaks], np.linspace(0, 50, 20), atol=50 / 128)
    for row in fb.weights:
        nz = np.flatnonzero(row)
        seg = row[nz[0]:nz[-1] + 1]
        top = int(np.argmax(seg))
        assert np.all(np.diff(seg[:top + 1]) >= 0) and np.all(np.diff(seg[top:]) <= 0)


def test_triangular_identity_configuration():
    fb = make_triangular_filterbank(7, 7)
    np.testing.assert_array_equal(fb.weights, np.eye(7))
    spec = np.random.default_rng(0).standard_normal((7, 5))
    np.testing.assert_array_equal(apply_filterbank(spec, fb), spec)


def test_triangular_m2_f5_by_hand():
    # bins at 0, 12.5, 25, 37.5, 50 Hz; peaks at 0 and 50 Hz; spacing 50 Hz
    # row 0 triangle: 1 - f/50 -> 1, .75, .5, .25, 0 ; sum 2.5
    # row 1 triangle: f/50     -> 0, .25, .5, .75, 1 ; sum 2.5
    fb = make_triangular_filterbank(2, 5)
    want = np.array([[1.0, 0.75, 0.5, 0.25, 0.0], [0.0, 0.25, 0.5, 0.75, 1.0]]) / 2.5
    np.testing.assert_allclose(fb.weights, want, atol=1e-15)


def test_adjacent_filters_cross_at_half_height():
    fb = make_triangular_filterbank(5, 129)
    raw = fb.weights / fb.weights.max(axis=1, keepdims=True)
    freqs = np.linspace(0, 50, 129)
    mid = 0.5 * (np.linspace(0, 50, 5)[1] + np.linspace(0, 50, 5)[2])
    k = int(np.argmin(np.abs(freqs - mid)))
    assert raw[1, k] == pytest.approx(0.5) and raw[2, k] == pytest.approx(0.5)


@pytest.mark.parametrize("m", [1, 130])
def test_triangular_m_out_of_range(m):
    with pytest.raises(ShapeError):
        make_triangular_filterbank(m, 129)


def test_all_ones_row_gives_column_sums():
    spec = np.random.default_rng(2).standard_normal((129, 29))
    out = apply_filterbank(spec, np.ones((1, 129)))
    np.testing.assert_allclose(out[0], spec.sum(axis=0), rtol=1e-12)


def test_canonical_filtered_plane():
    spec = stft_log_power(np.random.default_rng(3).standard_normal(3000))
    assert apply_filterbank(spec, make_triangular_filterbank(20, 129)).shape == (20, 29)


def test_apply_matches_triple_loop():
    rng = np.random.default_rng(4)
    spec, w = rng.standard_normal((5, 3)), rng.random((2, 5))
    want = np.zeros((2, 3))
    for m in range(2):
        for t in range(3):
            for f in range(5):
                want[m, t] += w[m, f] * spec[f, t]
    np.testing.assert_allclose(apply_filterbank(spec, w), want, rtol=0, atol=1e-15)


def test_apply_dimension_mismatch():
    with pytest.raises(ShapeError):
        apply_filterbank(np.zeros((128, 29)), make_triangular_filterbank(20, 129))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_filterbank_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.standard_normal((2, 129, 29))
    fb = make_triangular_filterbank(20, 129)
    lhs = apply_filterbank(a * s1 + b * s2, fb)
    rhs = a * apply_filterbank(s1, fb) + b * apply_filterbank(s2, fb)
    scale = np.maximum(np.abs(lhs), np.abs(rhs)).max() + 1e-300
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-12


# ---------------------------------------------------------------------------
# images

def test_single_plane_image():
    b = make_bundle(n_epochs=2, channels=("EEG",))
    img = build_tf_image(b, 1, ["EEG"], [make_triangular_filterbank(20, 129)])
    assert img.shape == (1, 20, 29) and img.channel_names == ("EEG",)


def test_three_plane_order():
    b = make_bundle(n_epochs=2, channels=("EMG", "EEG", "EOG"))
    fb = make_triangular_filterbank(20, 129)
    img = build_tf_image(b, 0, ["EEG", "EOG", "EMG"], [fb] * 3)
    assert img.shape == (3, 20, 29)
    for p, name in enumerate(["EEG", "EOG", "EMG"]):
        want = apply_filterbank(stft_log_power(b.epoch(name, 0)), fb)
        np.testing.assert_array_equal(img.values[p], want)


def test_identical_channels_identical_planes():
    b = make_bundle(n_epochs=1, channels=("A", "B"))
    b.channels[1].samples = b.channels[0].samples.copy()
    fb = make_triangular_filterbank(20, 129)
    img = build_tf_image(b, 0, ["A", "B"], [fb, fb])
    np.testing.assert_array_equal(img.values[0], img.values[1])


def test_image_errors():
    b = make_bundle(n_epochs=2)
    fb = make_triangular_filterbank(20, 129)
    with pytest.raises(BundleError):
        build_tf_image(b, 2, ["EEG"], [fb])
    with pytest.raises(BundleError, match="missing channel"):
        build_tf_image(b, 0, ["EMG"], [fb])


def test_recording_images_match_per_epoch():
    b = make_bundle(n_epochs=3)
    fb = make_triangular_filterbank(20, 129)
    all_imgs = recording_images(b, ["EOG", "EEG"], [fb, fb])
    for n in range(3):
        np.testing.assert_allclose(all_imgs[n], build_tf_image(b, n, ["EOG", "EEG"],
                                                               [fb, fb]).values, atol=1e-12)


def test_standardizer_uses_given_statistics():
    rng = np.random.default_rng(5)
    imgs = rng.standard_normal((10, 2, 4, 6)) * [[[3.0]], [[0.5]]] + [[[1.0]], [[-2.0]]]
    std = Standardizer.fit([imgs[:6], imgs[6:]])
    z = std.apply(imgs)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    np.testing.assert_allclose(std.apply(imgs[0]), z[0])


def test_tf_cache_round_trip(tmp_path):
    imgs = np.random.default_rng(6).standard_normal((3, 2, 20, 29))
    fbd, src = b"f" * 32, b"s" * 32
    write_tf_cache(tmp_path / "x.sstf", imgs, ["EEG", "EOG"], fbd, src)
    c = read_tf_cache(tmp_path / "x.sstf")
    np.testing.assert_array_equal(c.images, imgs.astype(np.float32))
    assert c.channel_names == ("EEG", "EOG") and c.fb_digest == fbd and c.source_digest == src
    raw = (tmp_path / "x.sstf").read_bytes()
    (tmp_path / "y.sstf").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_tf_cache(tmp_path / "y.sstf")


def test_filterbank_digest_distinguishes_banks():
    a = make_triangular_filterbank(20, 129)
    b = make_triangular_filterbank(21, 129)
    assert a.digest() != b.digest()
    assert a.digest() == FilterBank(a.weights.copy(), "triangular").digest()
