"""WAV ingestion, resampling and segmentation.

All clips are immutable float64 sample buffers. The ingestion pipeline
(load -> mono -> resample to 22050 Hz -> central segment) is the only
supported preparation path; everything downstream assumes its output.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

TARGET_RATE = 22050
SEGMENT_SECONDS = 120.0

# Polyphase anti-alias filter: Kaiser windowed sinc, 64 taps per phase.
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.6


class AudioIOError(Exception):
    """Base class for audio ingestion failures."""


class UnreadableFileError(AudioIOError):
    """File missing or not readable."""


class MalformedWavError(AudioIOError):
    """File is readable but not a structurally valid RIFF/WAVE file."""


class UnsupportedEncodingError(AudioIOError):
    """Valid WAV container with an encoding outside the PCM subset we accept."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio buffer with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if samples.size == 0:
            raise ValueError("AudioClip must contain at least one sample")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate, self.source_id)


def load_wav(path: str | Path) -> AudioClip:
    """Read a PCM WAV file, average channels to mono and scale to [-1, 1].

    Accepts 8/16/24-bit integer and 32-bit float encodings. The sample
    rate is preserved from the header; use :func:`resample` afterwards.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == 0xFFFE and len(body) >= 40:
                # WAVE_FORMAT_EXTENSIBLE: the real format tag leads the GUID.
                (sub_tag,) = struct.unpack_from("<H", body, 24)
                fmt = (sub_tag,) + fmt[1:]
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise MalformedWavError(f"{path}: data chunk shorter than declared")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")

    format_tag, n_channels, sample_rate, _, block_align, bits = fmt
    if n_channels < 1 or sample_rate <= 0:
        raise MalformedWavError(f"{path}: invalid channel count or sample rate")

    if format_tag == 1 and bits == 16:
        frames = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif format_tag == 1 and bits == 8:
        frames = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif format_tag == 1 and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8)
        b = b[:(b.size // 3) * 3].reshape(-1, 3).astype(np.int64)
        vals = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
        frames = vals.astype(np.float64) / float(1 << 23)
    elif format_tag == 3 and bits == 32:
        frames = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding (format tag {format_tag}, {bits}-bit)"
        )

    usable = (frames.size // n_channels) * n_channels
    if usable == 0:
        raise MalformedWavError(f"{path}: empty data chunk")
    mono = frames[:usable].reshape(-1, n_channels).mean(axis=1)
    return AudioClip(mono, sample_rate, source_id=path.stem)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM WAV, clamping samples to [-1, 1]."""
    quantized = np.clip(np.round(np.clip(clip.samples, -1.0, 1.0) * 32768.0), -32768, 32767)
    pcm = quantized.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    Path(path).write_bytes(header + pcm)


def _design_filter(up: int, down: int) -> np.ndarray:
    # Lowpass at the tighter of the two Nyquist limits, in the up-rate domain.
    half = (RESAMPLE_TAPS_PER_PHASE * up) // 2
    cutoff = 1.0 / (2 * max(up, down))
    m = np.arange(-half, half + 1)
    h = 2 * cutoff * np.sinc(2 * cutoff * m) * np.kaiser(2 * half + 1, RESAMPLE_KAISER_BETA)
    return h / h.sum()  # unit DC gain; resample_poly applies the up-factor


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion via polyphase windowed-sinc filtering."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    g = gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    out = signal.resample_poly(clip.samples, up, down, window=_design_filter(up, down))
    return AudioClip(out, target_rate, clip.source_id)


def central_segment(clip: AudioClip, seconds: float) -> AudioClip:
    """Extract the centered window of floor(seconds * rate) samples.

    Clips shorter than the window are returned unchanged.
    """
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    n_keep = int(seconds * clip.sample_rate)
    n = clip.samples.size
    if n <= n_keep:
        return clip
    start = (n - n_keep) // 2
    return clip.with_samples(clip.samples[start:start + n_keep])


def ingest(path: str | Path, clip_id: str | None = None,
           target_rate: int = TARGET_RATE,
           segment_seconds: float = SEGMENT_SECONDS) -> AudioClip:
    """Full preparation pipeline: load, mono, resample, central segment."""
    clip = load_wav(path)
    if clip_id is not None:
        clip = AudioClip(clip.samples, clip.sample_rate, clip_id)
    clip = resample(clip, target_rate)
    return central_segment(clip, segment_seconds)


def prepare_clip(clip: AudioClip,
                 target_rate: int = TARGET_RATE,
                 segment_seconds: float = SEGMENT_SECONDS) -> AudioClip:
    """Same normalization as :func:`ingest` for clips already in memory."""
    clip = resample(clip, target_rate)
    return central_segment(clip, segment_seconds)
