import numpy as np
import pytest

from hubrec.audio_io import AudioClip
from hubrec.catalogue import Catalogue, CatalogueEntry, pairwise_skl
from hubrec.features import MfccConfig, mfcc_forward
from hubrec.gaussian import fit_gaussian
from hubrec.mutual_proximity import DistanceKind, DistanceMatrix, mp_rescale


def brute_force_mp(values: np.ndarray) -> np.ndarray:
    """Literal double-loop evaluation of the empirical MP rescaling."""
    n = values.shape[0]
    out = np.zeros_like(values)
    for x in range(n):
        for t in range(n):
            if x == t:
                continue
            count = 0
            for j in range(n):
                if values[x, j] > values[x, t] and values[t, j] > values[t, x]:
                    count += 1
            out[x, t] = 1.0 - count / n
    return out


def brute_force_k_occurrence(values: np.ndarray, k: int) -> np.ndarray:
    """Recount of k-occurrence with explicit per-row sorting."""
    n = values.shape[0]
    occ = np.zeros(n, dtype=np.int64)
    for i in range(n):
        row = values[i].copy()
        row[i] = np.inf
        order = np.argsort(row, kind="stable")
        for j in order[:k]:
            occ[j] += 1
    return occ


def random_distance_values(rng: np.random.Generator, n: int,
                           low: float = 0.1, high: float = 5.0) -> np.ndarray:
    values = rng.uniform(low, high, size=(n, n))
    values = (values + values.T) / 2.0
    np.fill_diagonal(values, 0.0)
    return values


def random_distance_matrix(rng: np.random.Generator, n: int) -> DistanceMatrix:
    ids = tuple(f"i{j}" for j in range(n))
    return DistanceMatrix(random_distance_values(rng, n), ids, DistanceKind.SKL)


# Reduced feature config: 2048-sample clips get 15 frames of 8-dim
# coefficients, enough for well-conditioned Gaussians.
SMALL_CFG = MfccConfig(window_size=256, hop_size=128, n_mels=16, n_mfcc=8)


def build_memory_catalogue(n_songs: int = 10, n_samples: int = 2048, seed: int = 7,
                           cfg: MfccConfig = SMALL_CFG, k: int = 5,
                           spread: float = 0.02) -> Catalogue:
    """In-memory catalogue of similar noise clips (no disk, fast)."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=n_samples) * 0.1
    clips = [AudioClip(base + rng.normal(size=n_samples) * spread, 22050, f"s{i}")
             for i in range(n_songs)]
    models = [fit_gaussian(mfcc_forward(c, cfg), 1e-6) for c in clips]
    ids = tuple(c.source_id for c in clips)
    d_skl = DistanceMatrix(pairwise_skl(models), ids, DistanceKind.SKL)
    return Catalogue([CatalogueEntry(i) for i in ids], models, d_skl, mp_rescale(d_skl),
                     k=k, mfcc_config=cfg, clips={c.source_id: c for c in clips})


@pytest.fixture(scope="session")
def memory_catalogue() -> Catalogue:
    return build_memory_catalogue()
