import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hubrec.audio_io import AudioClip
from hubrec.features import (
    MfccConfig,
    frame_count,
    mel_band_centers,
    mfcc_forward,
    mfcc_vjp,
    _mel_filterbank,
)

CFG = MfccConfig()


def random_clip(rng, n=2048, scale=0.1):
    return AudioClip(rng.normal(size=n) * scale, 22050, "r")


def test_all_zero_clip_constant_coefficient():
    clip = AudioClip(np.zeros(4096), 22050, "z")
    frames = mfcc_forward(clip, CFG).frames
    expected_c0 = np.sqrt(36) * np.log(1e-10)
    assert np.allclose(frames[:, 0], expected_c0)
    assert np.max(np.abs(frames[:, 1:])) < 1e-10


def test_frame_count_formula():
    assert frame_count(2_646_000, CFG) == 5166
    assert frame_count(CFG.window_size, CFG) == 1
    assert frame_count(CFG.window_size - 1, CFG) == 0


def test_too_short_clip_raises():
    clip = AudioClip(np.zeros(512), 22050, "short")
    with pytest.raises(ValueError):
        mfcc_forward(clip, CFG)


def test_sine_at_band_center_dominates_band():
    # A pure tone at band b's center carries the most filterbank energy in b.
    centers = mel_band_centers(CFG)
    weights = _mel_filterbank(CFG, 22050)
    for band in (5, 12, 20, 30):
        freq = centers[band]
        t = np.arange(22050) / 22050
        clip = AudioClip(0.3 * np.sin(2 * np.pi * freq * t), 22050, "tone")
        windowed = clip.samples[:1024] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024))
        power = np.abs(np.fft.rfft(windowed)) ** 2
        band_energy = weights @ power
        assert np.argmax(band_energy) == band


def test_vjp_zero_upstream():
    rng = np.random.default_rng(0)
    clip = random_clip(rng)
    upstream = np.zeros((frame_count(2048, CFG), CFG.n_mfcc))
    assert np.all(mfcc_vjp(clip, CFG, upstream) == 0.0)


def test_vjp_frame_support():
    rng = np.random.default_rng(1)
    clip = random_clip(rng, n=3 * 1024)
    t = frame_count(clip.samples.size, CFG)
    for f in range(t):
        upstream = np.zeros((t, CFG.n_mfcc))
        upstream[f] = rng.normal(size=CFG.n_mfcc)
        grad = mfcc_vjp(clip, CFG, upstream)
        support = slice(f * CFG.hop_size, f * CFG.hop_size + CFG.window_size)
        outside = np.concatenate([grad[:support.start], grad[support.stop:]])
        assert np.all(outside == 0.0)
        assert np.any(grad[support] != 0.0)


def test_vjp_shape_mismatch():
    rng = np.random.default_rng(2)
    clip = random_clip(rng)
    with pytest.raises(ValueError):
        mfcc_vjp(clip, CFG, np.zeros((1, CFG.n_mfcc)))


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    clip = random_clip(rng)
    t = frame_count(2048, CFG)
    upstream = rng.normal(size=(t, CFG.n_mfcc))
    grad = mfcc_vjp(clip, CFG, upstream)

    def value(x):
        return float(np.sum(upstream * mfcc_forward(AudioClip(x, 22050, "r"), CFG).frames))

    h = 1e-4
    for i in rng.choice(2048, size=80, replace=False):
        xp = clip.samples.copy()
        xm = clip.samples.copy()
        xp[i] += h
        xm[i] -= h
        fd = (value(xp) - value(xm)) / (2 * h)
        if abs(grad[i]) > 1e-6:
            assert abs(fd - grad[i]) / abs(fd) < 1e-4


@settings(max_examples=20, deadline=None, derandomize=True)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_vjp_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    clip = random_clip(rng)
    t = frame_count(2048, CFG)
    u = rng.normal(size=(t, CFG.n_mfcc))
    v = rng.normal(size=(t, CFG.n_mfcc))
    combined = mfcc_vjp(clip, CFG, a * u + b * v)
    split = a * mfcc_vjp(clip, CFG, u) + b * mfcc_vjp(clip, CFG, v)
    assert np.allclose(combined, split, rtol=1e-9, atol=1e-12)


def test_vjp_finite_differences_non_tiling_hop():
    # Hop that does not divide the window exercises the generic
    # overlap-add accumulation.
    cfg = MfccConfig(window_size=256, hop_size=96, n_mels=16, n_mfcc=8)
    rng = np.random.default_rng(12)
    clip = AudioClip(rng.normal(size=1024) * 0.1, 22050, "odd")
    t = frame_count(1024, cfg)
    upstream = rng.normal(size=(t, cfg.n_mfcc))
    grad = mfcc_vjp(clip, cfg, upstream)

    def value(x):
        return float(np.sum(upstream * mfcc_forward(AudioClip(x, 22050, "odd"), cfg).frames))

    h = 1e-4
    for i in rng.choice(1024, size=50, replace=False):
        xp = clip.samples.copy()
        xm = clip.samples.copy()
        xp[i] += h
        xm[i] -= h
        fd = (value(xp) - value(xm)) / (2 * h)
        if abs(grad[i]) > 1e-6:
            assert abs(fd - grad[i]) / abs(fd) < 1e-4


def test_determinism_bit_identical():
    rng = np.random.default_rng(4)
    clip = random_clip(rng)
    first = mfcc_forward(clip, CFG).frames
    second = mfcc_forward(clip, CFG).frames
    assert np.array_equal(first, second)


@settings(max_examples=15, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2 ** 16), scale=st.floats(1e-8, 1.0))
def test_log_floor_keeps_everything_finite(seed, scale):
    rng = np.random.default_rng(seed)
    clip = random_clip(rng, scale=scale)
    frames = mfcc_forward(clip, CFG).frames
    assert np.all(np.isfinite(frames))
    # First coefficient bounds every log-mel value from below via the floor.
    assert frames[:, 0].min() >= np.sqrt(36) * np.log(1e-10) - 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        MfccConfig(hop_size=0)
    with pytest.raises(ValueError):
        MfccConfig(hop_size=2048)
    with pytest.raises(ValueError):
        MfccConfig(n_mfcc=40)
    with pytest.raises(ValueError):
        MfccConfig(fmin=100, fmax=50)
    with pytest.raises(ValueError):
        MfccConfig(fmax=22050).validate_rate(22050)
