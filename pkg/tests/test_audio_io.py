import struct

import numpy as np
import pytest

from hubrec.audio_io import (
    AudioClip,
    MalformedWavError,
    UnreadableFileError,
    UnsupportedEncodingError,
    central_segment,
    ingest,
    load_wav,
    resample,
    write_wav,
)


def write_raw_wav(path, frames: np.ndarray, sample_rate: int, bits: int = 16,
                  format_tag: int = 1):
    """Minimal writer for multi-channel / multi-format test files."""
    n_channels = frames.shape[1] if frames.ndim == 2 else 1
    flat = frames.reshape(-1)
    if format_tag == 1 and bits == 16:
        payload = np.clip(np.round(flat * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif format_tag == 1 and bits == 8:
        payload = (np.clip(np.round(flat * 128.0), -128, 127) + 128).astype(np.uint8).tobytes()
    elif format_tag == 1 and bits == 24:
        vals = np.clip(np.round(flat * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int64)
        vals = np.where(vals < 0, vals + (1 << 24), vals)
        raw = np.zeros((vals.size, 3), dtype=np.uint8)
        raw[:, 0] = vals & 0xFF
        raw[:, 1] = (vals >> 8) & 0xFF
        raw[:, 2] = (vals >> 16) & 0xFF
        payload = raw.tobytes()
    elif format_tag == 3 and bits == 32:
        payload = flat.astype("<f4").tobytes()
    else:
        raise ValueError("unsupported test format")
    block = n_channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, format_tag, n_channels, sample_rate,
        sample_rate * block, block, bits, b"data", len(payload),
    )
    path.write_bytes(header + payload)


def test_opposite_channels_average_to_zero(tmp_path):
    frames = np.stack([np.full(100, 0.5), np.full(100, -0.5)], axis=1)
    path = tmp_path / "stereo.wav"
    write_raw_wav(path, frames, 22050)
    clip = load_wav(path)
    assert np.all(clip.samples == 0.0)


def test_full_scale_16bit_maps_to_minus_one(tmp_path):
    path = tmp_path / "fs.wav"
    payload = struct.pack("<h", -32768) * 10
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, 22050, 44100, 2, 16, b"data", len(payload),
    )
    path.write_bytes(header + payload)
    clip = load_wav(path)
    assert np.all(clip.samples == -1.0)


def test_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    clip = AudioClip(rng.uniform(-1, 1, size=5000), 22050, "rt")
    path = tmp_path / "rt.wav"
    write_wav(path, clip)
    back = load_wav(path)
    assert back.sample_rate == 22050
    assert np.max(np.abs(back.samples - clip.samples)) <= 2.0 ** -15


@pytest.mark.parametrize("bits,format_tag", [(8, 1), (24, 1), (32, 3)])
def test_other_encodings_load(tmp_path, bits, format_tag):
    rng = np.random.default_rng(1)
    frames = rng.uniform(-0.9, 0.9, size=256)
    path = tmp_path / f"enc{bits}.wav"
    write_raw_wav(path, frames, 8000, bits=bits, format_tag=format_tag)
    clip = load_wav(path)
    assert clip.sample_rate == 8000
    tol = {8: 1 / 128, 24: 1 / (1 << 23), 32: 1e-7}[bits]
    assert np.max(np.abs(clip.samples - frames)) <= tol + 1e-12


def test_error_taxonomy(tmp_path):
    with pytest.raises(UnreadableFileError):
        load_wav(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a riff file at all")
    with pytest.raises(MalformedWavError):
        load_wav(bad)
    # Valid container, unsupported encoding (mu-law, format tag 7).
    payload = b"\x00" * 32
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 7, 1, 8000, 8000, 1, 8, b"data", len(payload),
    )
    ulaw = tmp_path / "ulaw.wav"
    ulaw.write_bytes(header + payload)
    with pytest.raises(UnsupportedEncodingError):
        load_wav(ulaw)


def test_resample_identity():
    clip = AudioClip(np.arange(100) / 100.0, 22050, "id")
    assert resample(clip, 22050) is clip


def test_resample_length_ratio():
    clip = AudioClip(np.zeros(44100), 44100, "z")
    out = resample(clip, 22050)
    assert abs(out.samples.size - 22050) <= 1
    assert out.sample_rate == 22050


def test_resample_sine_oracle():
    t = np.arange(44100 * 2) / 44100
    clip = AudioClip(np.sin(2 * np.pi * 1000 * t), 44100, "sine")
    out = resample(clip, 22050)
    t2 = np.arange(out.samples.size) / 22050
    ref = np.sin(2 * np.pi * 1000 * t2)
    edge = 500
    assert np.max(np.abs(out.samples[edge:-edge] - ref[edge:-edge])) < 1e-3


def test_central_segment_cases():
    rate = 100
    clip = AudioClip(np.arange(240 * rate, dtype=float), rate, "long")
    seg = central_segment(clip, 120)
    assert seg.samples.size == 120 * rate
    assert seg.samples[0] == 60 * rate  # starts at the 60 s mark

    short = AudioClip(np.arange(90 * rate, dtype=float), rate, "short")
    assert central_segment(short, 120) is short

    exact = AudioClip(np.arange(120 * rate, dtype=float), rate, "exact")
    assert central_segment(exact, 120) is exact


def test_ingestion_invariants(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "song.wav"
    write_raw_wav(path, rng.uniform(-0.5, 0.5, size=44100 * 3), 44100)
    clip = ingest(path, "song", segment_seconds=2.0)
    assert clip.sample_rate == 22050
    assert clip.duration <= 2.0 + 1e-9
    assert clip.source_id == "song"


def test_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([]), 22050, "empty")
    with pytest.raises(ValueError):
        AudioClip(np.zeros(10), 0, "rate")
    clip = AudioClip(np.zeros(10), 22050, "frozen")
    with pytest.raises(ValueError):
        clip.samples[0] = 1.0
