"""Differentiable MFCC extraction.

The forward pass maps a clip to a T x n_mfcc matrix of per-frame
coefficients; the VJP maps an upstream cotangent on that matrix back to a
per-sample gradient. Every stage is either linear (window, DFT, mel
filterbank, DCT) or has an analytic derivative (power, floored log), so
the VJP is exact up to floating point.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip

LOG_FLOOR_DEFAULT = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    """STFT / mel / DCT parameters of the feature frontend."""

    window_size: int = 1024
    hop_size: int = 512
    n_mels: int = 36
    n_mfcc: int = 20
    log_floor: float = LOG_FLOOR_DEFAULT
    fmin: float = 20.0
    fmax: float = 11025.0

    def __post_init__(self):
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError("require 0 < hop_size <= window_size")
        if not 0 < self.n_mfcc <= self.n_mels:
            raise ValueError("require 0 < n_mfcc <= n_mels")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError("require 0 <= fmin < fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def validate_rate(self, sample_rate: int) -> None:
        if self.fmax > sample_rate / 2 + 1e-9:
            raise ValueError(f"fmax {self.fmax} exceeds Nyquist for rate {sample_rate}")


@dataclass(frozen=True)
class MfccMatrix:
    """Per-frame MFCC vectors for one clip."""

    frames: np.ndarray  # (T, n_mfcc)
    clip_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("frames must be a 2-D matrix")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames must be finite")
        frames = frames.copy()
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(n_samples: int, cfg: MfccConfig) -> int:
    """Number of full analysis frames; the tail shorter than a window is dropped."""
    if n_samples < cfg.window_size:
        return 0
    return (n_samples - cfg.window_size) // cfg.hop_size + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(cfg: MfccConfig, sample_rate: int) -> np.ndarray:
    """(n_mels, n_bins) triangular filters on the HTK mel scale, unnormalized."""
    n_bins = cfg.window_size // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / cfg.window_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bin_freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    falling = (upper[:, None] - bin_freqs[None, :]) / (upper - center)[:, None]
    return np.maximum(0.0, np.minimum(rising, falling))


@lru_cache(maxsize=8)
def _dct_matrix(cfg: MfccConfig) -> np.ndarray:
    """First n_mfcc rows of the orthonormal DCT-II matrix of size n_mels."""
    n = cfg.n_mels
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    return mat[:cfg.n_mfcc, :]


@lru_cache(maxsize=8)
def _window(window_size: int) -> np.ndarray:
    # Periodic Hann, the spectral-analysis convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window_size) / window_size)


def mel_band_centers(cfg: MfccConfig) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def _frames(samples: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    t = frame_count(samples.size, cfg)
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_size)
    return view[::cfg.hop_size][:t]


def _forward_stages(samples: np.ndarray, cfg: MfccConfig, sample_rate: int):
    window = _window(cfg.window_size)
    windowed = _frames(samples, cfg) * window
    spectrum = np.fft.rfft(windowed, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel = power @ _mel_filterbank(cfg, sample_rate).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    mfcc = logmel @ _dct_matrix(cfg).T
    return windowed, spectrum, mel, mfcc


def mfcc_forward(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> MfccMatrix:
    """Hann-windowed STFT -> power -> mel -> floored log -> orthonormal DCT-II."""
    return mfcc_with_pullback(clip, cfg)[0]


def mfcc_with_pullback(clip: AudioClip, cfg: MfccConfig = MfccConfig()):
    """Forward pass plus a pullback mapping an upstream cotangent on the
    coefficient matrix to a per-sample gradient, reusing the forward
    intermediates."""
    cfg.validate_rate(clip.sample_rate)
    samples = clip.samples
    if samples.size < cfg.window_size:
        raise ValueError(
            f"clip has {samples.size} samples, shorter than one window ({cfg.window_size})"
        )
    _, spectrum, mel, mfcc = _forward_stages(samples, cfg, clip.sample_rate)
    t = mfcc.shape[0]
    sample_rate = clip.sample_rate
    n_samples = samples.size

    def pullback(upstream: np.ndarray) -> np.ndarray:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (t, cfg.n_mfcc):
            raise ValueError(
                f"upstream shape {upstream.shape} does not match ({t}, {cfg.n_mfcc})")
        g_logmel = upstream @ _dct_matrix(cfg)
        g_mel = np.where(mel > cfg.log_floor, g_logmel / np.maximum(mel, cfg.log_floor), 0.0)
        g_power = g_mel @ _mel_filterbank(cfg, sample_rate)

        # Adjoint of power-of-rfft for real input: double DC (and Nyquist
        # when the window length is even), then scale the inverse by N.
        n = cfg.window_size
        v = g_power * spectrum
        v[:, 0] *= 2.0
        if n % 2 == 0:
            v[:, -1] *= 2.0
        g_windowed = n * np.fft.irfft(v, n=n, axis=1)
        g_frames = g_windowed * _window(n)
        return _overlap_add(g_frames, cfg.hop_size, n_samples)

    return MfccMatrix(mfcc, clip.source_id), pullback


def _overlap_add(frame_grads: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Accumulate per-frame gradients into the shared sample axis."""
    t, window = frame_grads.shape
    out = np.zeros(n_samples)
    if window % hop == 0:
        # Frames f, f+q, f+2q, ... tile the axis without overlap, so each
        # residue class collapses to one contiguous vectorized add.
        q = window // hop
        for r in range(min(q, t)):
            sub = frame_grads[r::q]
            start = r * hop
            out[start:start + sub.size] += sub.reshape(-1)
    else:
        for f in range(t):
            start = f * hop
            out[start:start + window] += frame_grads[f]
    return out


def mfcc_vjp(clip: AudioClip, cfg: MfccConfig, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, MFCC(x)> with respect to the samples x.

    Linear stages transpose exactly; the power stage uses the rfft adjoint
    and the floored log contributes 1/mel on the active branch, zero below
    the floor. Overlapping frames accumulate additively.
    """
    return mfcc_with_pullback(clip, cfg)[1](upstream)
