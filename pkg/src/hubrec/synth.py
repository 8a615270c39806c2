"""Seeded synthetic corpora: filtered-noise songs with natural hubness.

Every song's spectral envelope is the corpus-wide base envelope plus a
cluster tilt plus a personal bump pattern scaled by a per-song radius.
In the resulting high-dimensional feature space distances concentrate,
so the few small-radius songs near the center of the cloud land in a
large share of nearest-neighbor lists (hubs), while large-radius
outliers are never recommended (anti-hubs). All randomness flows from
one seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, write_wav


@dataclass(frozen=True)
class SynthConfig:
    n_songs: int = 100
    n_clusters: int = 6
    duration: float = 4.0
    sample_rate: int = 22050
    seed: int = 0
    n_personal_bumps: int = 32
    radius: float = 1.0
    radius_sigma: float = 0.12
    cluster_strength: float = 0.2
    n_central: int = 3
    central_scale: float = 0.15
    outlier_fraction: float = 0.1
    outlier_boost: float = 2.5
    sections: int = 32
    section_wiggle: float = 1.0
    am_depth: float = 0.3

    def __post_init__(self):
        if self.n_songs < 2 or self.n_clusters < 1:
            raise ValueError("need at least 2 songs and 1 cluster")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample_rate must be positive")
        if not 0 <= self.n_central <= self.n_songs:
            raise ValueError("n_central must not exceed n_songs")


def _random_bumps(rng: np.random.Generator, n_bumps: int,
                  width_lo: float = 0.25, width_hi: float = 0.9):
    lo, hi = np.log(60.0), np.log(9000.0)
    return (
        rng.uniform(lo, hi, size=n_bumps),
        rng.uniform(width_lo, width_hi, size=n_bumps),
        rng.uniform(0.8, 2.4, size=n_bumps),
    )


def _eval_bumps(bumps, log_freqs: np.ndarray) -> np.ndarray:
    centers, widths, heights = bumps
    z = (log_freqs[:, None] - centers[None, :]) / widths[None, :]
    return (heights[None, :] * np.exp(-0.5 * z ** 2)).sum(axis=1)


def _shaped_noise(rng: np.random.Generator, env_log: np.ndarray, n_samples: int) -> np.ndarray:
    magnitude = np.exp(env_log)
    magnitude[0] = 0.0  # no DC
    n_bins = magnitude.size
    spectrum = magnitude * (rng.normal(size=n_bins) + 1j * rng.normal(size=n_bins))
    return np.fft.irfft(spectrum, n=n_samples)


def generate_corpus_clips(cfg: SynthConfig) -> tuple[list[AudioClip], list[str]]:
    rng = np.random.default_rng(cfg.seed)
    n_samples = int(cfg.duration * cfg.sample_rate)

    # Envelopes are parametric so each crossfaded section can evaluate
    # them on its own frequency grid.
    grid_cache: dict[int, np.ndarray] = {}
    eval_cache: dict[tuple, np.ndarray] = {}

    def log_freqs(length: int) -> np.ndarray:
        if length not in grid_cache:
            freqs = np.arange(length // 2 + 1) * cfg.sample_rate / length
            grid_cache[length] = np.log(np.maximum(freqs, 1.0))
        return grid_cache[length]

    def eval_cached(key: str, bumps_list, length: int) -> np.ndarray:
        """(len(bumps_list), n_bins) evaluations, cached per segment length."""
        if (key, length) not in eval_cache:
            grid = log_freqs(length)
            eval_cache[(key, length)] = np.stack(
                [_eval_bumps(b, grid) for b in bumps_list])
        return eval_cache[(key, length)]

    base_bumps = _random_bumps(rng, 6)
    cluster_bumps = [_random_bumps(rng, 4) for _ in range(cfg.n_clusters)]
    # Corpus-wide bases: every song's personal offset and every section's
    # wiggle are combinations of shared patterns. Shared directions mean
    # the planted radii control the realized geometry (no per-song norm
    # luck) and within-song covariances agree in shape across songs.
    personal_basis = [_random_bumps(rng, 3, width_lo=0.1, width_hi=0.3)
                      for _ in range(cfg.n_personal_bumps)]
    wiggle_basis = [_random_bumps(rng, 3, width_lo=0.15, width_hi=0.45)
                    for _ in range(12)]

    clips: list[AudioClip] = []
    labels: list[str] = []
    for i in range(cfg.n_songs):
        cluster = i % cfg.n_clusters
        radius = cfg.radius * rng.lognormal(mean=0.0, sigma=cfg.radius_sigma)
        if i < cfg.n_central:
            radius *= cfg.central_scale
        elif rng.uniform() < cfg.outlier_fraction:
            radius *= cfg.outlier_boost
        personal_coeffs = rng.normal(size=len(personal_basis))
        personal_coeffs *= radius / np.sqrt(len(personal_basis))

        bounds = np.linspace(0, n_samples, cfg.sections + 1).astype(int)
        fade = max(1, min(n_samples // (4 * cfg.sections), 2048))
        # Demeaned over sections: the wiggle creates frame variance without
        # shifting the song's mean envelope away from its planted radius.
        wiggle_coeffs = rng.normal(size=(cfg.sections, len(wiggle_basis)))
        wiggle_coeffs -= wiggle_coeffs.mean(axis=0, keepdims=True)
        x = np.zeros(n_samples)
        for s in range(cfg.sections):
            lo = max(0, bounds[s] - fade)
            hi = min(n_samples, bounds[s + 1] + fade)
            length = hi - lo
            env = eval_cached("base", [base_bumps], length)[0]
            env = env + cfg.cluster_strength * eval_cached(
                "cluster", cluster_bumps, length)[cluster]
            bump = personal_coeffs @ eval_cached("personal", personal_basis, length)
            env += bump - bump.mean()
            # Per-section variation along the shared basis so frames within
            # a song differ in more than loudness.
            wig = wiggle_coeffs[s] @ eval_cached("wiggle", wiggle_basis, length)
            wig = wig / np.sqrt(len(wiggle_basis))
            env += cfg.section_wiggle * (wig - wig.mean())
            seg = _shaped_noise(rng, env, hi - lo)
            window = np.ones(hi - lo)
            ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, fade))
            if lo > 0:
                window[:fade] = ramp
            if hi < n_samples:
                window[-fade:] = ramp[::-1]
            x[lo:hi] += seg * window

        t = np.arange(n_samples) / cfg.sample_rate
        am_freqs = rng.uniform(0.3, 2.5, size=2)
        am_phases = rng.uniform(0, 2 * np.pi, size=2)
        x *= 1.0 + cfg.am_depth * 0.5 * sum(
            np.sin(2 * np.pi * f * t + p) for f, p in zip(am_freqs, am_phases)
        )

        # RMS normalization keeps per-song loudness aligned; the peak stays
        # well inside [-1, 1] for the 16-bit writer.
        x *= 0.08 / np.sqrt(np.mean(x ** 2))
        peak = np.max(np.abs(x))
        if peak > 0.95:
            x *= 0.95 / peak
        clips.append(AudioClip(x, cfg.sample_rate, f"s{i:04d}"))
        labels.append(f"c{cluster}")
    return clips, labels


def write_corpus(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Render the corpus to 16-bit WAVs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    clips, labels = generate_corpus_clips(cfg)
    lines = []
    for clip, label in zip(clips, labels):
        filename = f"{clip.source_id}.wav"
        write_wav(audio_dir / filename, clip)
        lines.append(json.dumps(
            {"id": clip.source_id, "path": f"audio/{filename}", "label": label},
            sort_keys=True,
        ))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
