"""k-occurrence statistics, hub classification, retrieval accuracy and SNR."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip
from .mutual_proximity import DistanceMatrix

HUB_SIZE_FACTOR = 5  # a song is a hub when its k-occurrence reaches 5k


@dataclass(frozen=True)
class HubnessReport:
    k: int
    occurrences: np.ndarray
    n_hubs: int
    n_antihubs: int
    n_normal: int
    max_occurrence: int
    skewness: float
    retrieval_accuracy: float | None = None

    @property
    def n(self) -> int:
        return int(np.asarray(self.occurrences).size)

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "counts": {"hub": self.n_hubs, "antihub": self.n_antihubs, "normal": self.n_normal},
            "max": self.max_occurrence,
            "skewness": self.skewness,
            "r_at_k": self.retrieval_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def nearest_neighbors(d: DistanceMatrix, k: int) -> np.ndarray:
    """(n, k) neighbor indices per row, self excluded, ties by ascending index."""
    n = d.n
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    values = d.values.copy()
    np.fill_diagonal(values, np.inf)
    # Stable sort on values resolves equal distances by ascending index.
    order = np.argsort(values, axis=1, kind="stable")
    return order[:, :k]


def k_occurrence(d: DistanceMatrix, k: int) -> np.ndarray:
    """How often each object appears in the k-nearest lists of the others."""
    votes = nearest_neighbors(d, k)
    return np.bincount(votes.ravel(), minlength=d.n).astype(np.int64)


def skewness(values) -> float:
    """Standardized third moment; zero for degenerate (constant) input."""
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean()
    m2 = np.mean(centered ** 2)
    if m2 == 0.0:
        return 0.0
    return float(np.mean(centered ** 3) / m2 ** 1.5)


def classify(occurrences, k: int, retrieval_accuracy: float | None = None) -> HubnessReport:
    """Partition into hubs (O >= 5k), anti-hubs (O = 0) and normal songs."""
    occurrences = np.asarray(occurrences, dtype=np.int64)
    threshold = HUB_SIZE_FACTOR * k
    n_hubs = int(np.sum(occurrences >= threshold))
    n_antihubs = int(np.sum(occurrences == 0))
    return HubnessReport(
        k=k,
        occurrences=occurrences,
        n_hubs=n_hubs,
        n_antihubs=n_antihubs,
        n_normal=int(occurrences.size - n_hubs - n_antihubs),
        max_occurrence=int(occurrences.max()),
        skewness=skewness(occurrences),
        retrieval_accuracy=retrieval_accuracy,
    )


def kth_neighbor_distance(d: DistanceMatrix, k: int) -> np.ndarray:
    """Per row, the distance of the k-th nearest neighbor (self excluded)."""
    n = d.n
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    values = d.values.copy()
    np.fill_diagonal(values, np.inf)
    return np.partition(values, k - 1, axis=1)[:, k - 1]


def single_song_occurrence(d: DistanceMatrix, new_row, k: int) -> int:
    """k-occurrence a new object would have if appended to the catalogue.

    The new object enters row i's k-nearest list iff it is strictly closer
    than i's current k-th neighbor; on an exact tie the incumbent wins
    because the appended object carries the largest index.
    """
    new_row = np.asarray(new_row, dtype=np.float64)
    if new_row.shape != (d.n,):
        raise ValueError(f"new_row must have length {d.n}")
    return int(np.sum(new_row < kth_neighbor_distance(d, k)))


def retrieval_accuracy(d: DistanceMatrix, labels, k: int) -> float:
    """Mean fraction of each song's k nearest neighbors sharing its label."""
    labels = list(labels)
    if len(labels) != d.n:
        raise ValueError("every song needs a label")
    if any(lbl is None for lbl in labels):
        raise ValueError("every song needs a label")
    _, codes = np.unique([str(lbl) for lbl in labels], return_inverse=True)
    neighbors = nearest_neighbors(d, k)
    matches = codes[neighbors] == codes[:, None]
    return float(matches.mean())


def snr_db(reference: AudioClip, perturbation) -> float:
    """10 log10 of signal power over perturbation power; inf for zero delta."""
    ref = reference.samples
    delta = np.asarray(perturbation, dtype=np.float64)
    if delta.shape != ref.shape:
        raise ValueError("perturbation length must match the reference")
    signal_power = float(np.sum(ref ** 2))
    if signal_power == 0.0:
        raise ValueError("reference signal is all zero")
    noise_power = float(np.sum(delta ** 2))
    if noise_power == 0.0:
        return float("inf")
    return float(10.0 * np.log10(signal_power / noise_power))
