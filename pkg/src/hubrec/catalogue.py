"""Song catalogue: ingestion, model fitting, pairwise distances, recommendation.

A catalogue is immutable after construction; add_song returns a new
catalogue sharing the unchanged pieces. Every cached stage (features,
models, distance matrices) carries the configuration fingerprint and is
rejected when stale.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import cache
from .audio_io import AudioClip, ingest, prepare_clip
from .features import MfccConfig, mfcc_forward
from .gaussian import GaussianModel, RIDGE_DEFAULT, chol_inverse, fit_gaussian
from .hubness import k_occurrence
from .mutual_proximity import (
    DistanceKind,
    DistanceMatrix,
    augment_matrix,
    mp_pair_counts,
    mp_rescale,
    mp_rescale_incremental,
)

DEFAULT_K = 5
META_FILENAME = "meta.json"
MANIFEST_FILENAME = "manifest.jsonl"


class CatalogueError(Exception):
    pass


@dataclass(frozen=True)
class CatalogueEntry:
    clip_id: str
    path: Path | None = None
    label: str | None = None


class ModelStack:
    """Catalogue-side tensors for vectorized divergence work."""

    def __init__(self, models: list[GaussianModel]):
        self.means = np.stack([m.mean for m in models])
        self.covs = np.stack([m.cov for m in models])
        pairs = [chol_inverse(m.cov) for m in models]
        self.invs = np.stack([inv for inv, _ in pairs])
        self.dim = self.means.shape[1]

    def skl_row(self, model: GaussianModel, inv: np.ndarray | None = None) -> np.ndarray:
        """Divergences from one external model to every catalogue model."""
        if inv is None:
            inv, _ = chol_inverse(model.cov)
        cross = np.einsum("nij,ij->n", self.invs, model.cov)
        cross += np.einsum("nij,ij->n", self.covs, inv)
        delta = model.mean[None, :] - self.means
        maha = np.einsum("ni,nij,nj->n", delta, self.invs, delta)
        maha += np.einsum("ni,ij,nj->n", delta, inv, delta)
        return np.maximum(0.25 * (cross + maha) - self.dim / 2.0, 0.0)


def pairwise_skl(models: list[GaussianModel]) -> np.ndarray:
    """Full symmetric divergence matrix over the catalogue models."""
    stack = ModelStack(models)
    n, d = stack.means.shape
    cross = np.einsum("aij,bij->ab", stack.covs, stack.invs)
    maha = np.empty((n, n))
    for i in range(n):
        delta = stack.means[i][None, :] - stack.means
        maha[i] = np.einsum("nj,jk,nk->n", delta, stack.invs[i], delta)
    # Grouped so each symmetric pair is summed first; keeps the result
    # bitwise symmetric despite non-associative float addition.
    out = 0.25 * ((cross + cross.T) + (maha + maha.T)) - d / 2.0
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)


def read_manifest(path: str | Path) -> list[CatalogueEntry]:
    entries = []
    base = Path(path).parent
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CatalogueError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CatalogueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if "id" not in record or "path" not in record:
            raise CatalogueError(f"{path}:{lineno}: manifest entries need 'id' and 'path'")
        clip_path = Path(record["path"])
        if not clip_path.is_absolute():
            clip_path = base / clip_path
        entries.append(CatalogueEntry(str(record["id"]), clip_path, record.get("label")))
    seen = set()
    for entry in entries:
        if entry.clip_id in seen:
            raise CatalogueError(f"duplicate id in manifest: {entry.clip_id!r}")
        seen.add(entry.clip_id)
    return entries


class Catalogue:
    """Immutable bundle of entries, models and distance matrices."""

    def __init__(self, entries: list[CatalogueEntry], models: list[GaussianModel],
                 d_skl: DistanceMatrix, d_mp: DistanceMatrix | None = None,
                 k: int = DEFAULT_K, mfcc_config: MfccConfig = MfccConfig(),
                 reg: float = RIDGE_DEFAULT, clips: dict[str, AudioClip] | None = None):
        if not (len(entries) == len(models) == d_skl.n):
            raise CatalogueError("entry, model and matrix sizes disagree")
        if d_mp is not None and d_mp.n != d_skl.n:
            raise CatalogueError("MP matrix dimension disagrees with the catalogue")
        self.entries = list(entries)
        self.models = list(models)
        self.d_skl = d_skl
        self.d_mp = d_mp
        self.k = k
        self.mfcc_config = mfcc_config
        self.reg = reg
        self._clip_memo: dict[str, AudioClip] = dict(clips or {})
        self._stack: ModelStack | None = None
        self._pair_counts: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return self.d_skl.ids

    @property
    def labels(self) -> list[str] | None:
        labels = [entry.label for entry in self.entries]
        return None if any(lbl is None for lbl in labels) else labels

    def index_of(self, clip_id: str) -> int:
        return self.d_skl.index_of(clip_id)

    @property
    def stack(self) -> ModelStack:
        if self._stack is None:
            self._stack = ModelStack(self.models)
        return self._stack

    @property
    def mp_pair_counts(self) -> np.ndarray:
        """Counting numerators of the MP rescale, cached for incremental use."""
        if self._pair_counts is None:
            self._pair_counts = mp_pair_counts(self.d_skl.values)
        return self._pair_counts

    def clip(self, clip_id: str) -> AudioClip:
        """Prepared analysis segment for one song, loaded lazily."""
        if clip_id not in self._clip_memo:
            entry = self.entries[self.index_of(clip_id)]
            if entry.path is None:
                raise CatalogueError(f"no audio available for {clip_id!r}")
            self._clip_memo[clip_id] = ingest(entry.path, clip_id)
        return self._clip_memo[clip_id]

    def matrix(self, defended: bool) -> DistanceMatrix:
        if not defended:
            return self.d_skl
        if self.d_mp is None:
            raise CatalogueError("defended mode requested but no MP matrix present")
        return self.d_mp

    def occurrences(self, defended: bool) -> np.ndarray:
        return k_occurrence(self.matrix(defended), self.k)

    def with_mp(self) -> "Catalogue":
        if self.d_mp is not None:
            return self
        return Catalogue(self.entries, self.models, self.d_skl, mp_rescale(self.d_skl),
                         self.k, self.mfcc_config, self.reg, self._clip_memo)


def recommend(c: Catalogue, query_id: str, defended: bool = False) -> list[str]:
    """The k nearest songs to the query, nearest first, self excluded."""
    matrix = c.matrix(defended)
    row = matrix.values[c.index_of(query_id)].copy()
    row[c.index_of(query_id)] = np.inf
    order = np.argsort(row, kind="stable")
    return [matrix.ids[i] for i in order[:c.k]]


def add_song(c: Catalogue, clip: AudioClip) -> Catalogue:
    """Return a new catalogue with one song appended (copy-on-write)."""
    if clip.source_id in c.d_skl.ids:
        raise CatalogueError(f"duplicate id: {clip.source_id!r}")
    prepared = prepare_clip(clip)
    model = fit_gaussian(mfcc_forward(prepared, c.mfcc_config), c.reg)
    row = c.stack.skl_row(model)
    d_skl = DistanceMatrix(augment_matrix(c.d_skl.values, row),
                           c.d_skl.ids + (clip.source_id,), DistanceKind.SKL)
    d_mp = None
    if c.d_mp is not None:
        _, d_mp = mp_rescale_incremental(c.d_skl, row, new_id=clip.source_id)
    entries = c.entries + [CatalogueEntry(clip.source_id, None, None)]
    clips = dict(c._clip_memo)
    clips[clip.source_id] = prepared
    return Catalogue(entries, c.models + [model], d_skl, d_mp, c.k,
                     c.mfcc_config, c.reg, clips)


def build(manifest: str | Path, cfg: MfccConfig = MfccConfig(), *,
          k: int = DEFAULT_K, reg: float = RIDGE_DEFAULT, with_mp: bool = True,
          catalogue_dir: str | Path | None = None,
          overwrite_stale: bool = False) -> Catalogue:
    """Ingest every manifest entry, fit models, compute distances, cache all.

    Caches live next to the manifest (or in catalogue_dir). A cache whose
    fingerprint disagrees with cfg raises StaleCacheError unless
    overwrite_stale is set, in which case it is recomputed.
    """
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    if len(entries) < k + 1:
        raise CatalogueError(f"need at least {k + 1} songs, manifest has {len(entries)}")
    out_dir = Path(catalogue_dir) if catalogue_dir is not None else manifest.parent
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cache.config_fingerprint(cfg)

    def load_or_none(reader, path):
        if not Path(path).exists():
            return None
        try:
            return reader(path, fingerprint)
        except cache.StaleCacheError:
            if overwrite_stale:
                return None
            raise

    feature_list = []
    for entry in entries:
        feats = load_or_none(cache.read_features, features_dir / f"{entry.clip_id}.bin")
        if feats is None or feats.clip_id != entry.clip_id:
            clip = _ingest_entry(entry)
            feats = mfcc_forward(clip, cfg)
            cache.write_features(features_dir / f"{entry.clip_id}.bin", feats, fingerprint)
        feature_list.append(feats)

    ids = tuple(entry.clip_id for entry in entries)
    models = load_or_none(cache.read_models, out_dir / "models.bin")
    if models is None or tuple(m.clip_id for m in models) != ids:
        models = [fit_gaussian(feats, reg) for feats in feature_list]
        cache.write_models(out_dir / "models.bin", models, fingerprint)

    d_skl = load_or_none(cache.read_distance, out_dir / "dist_skl.bin")
    if d_skl is None or d_skl.ids != ids or d_skl.kind != DistanceKind.SKL:
        d_skl = DistanceMatrix(pairwise_skl(models), ids, DistanceKind.SKL)
        cache.write_distance(out_dir / "dist_skl.bin", d_skl, fingerprint)

    d_mp = None
    if with_mp:
        d_mp = load_or_none(cache.read_distance, out_dir / "dist_mp.bin")
        if d_mp is None or d_mp.ids != ids or d_mp.kind != DistanceKind.MP:
            d_mp = mp_rescale(d_skl)
            cache.write_distance(out_dir / "dist_mp.bin", d_mp, fingerprint)

    meta = {
        "version": cache.PIPELINE_VERSION,
        "fingerprint": fingerprint,
        "k": k,
        "reg": reg,
        "mfcc": asdict(cfg),
        "n": len(entries),
    }
    (out_dir / META_FILENAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Catalogue(entries, models, d_skl, d_mp, k, cfg, reg)


def _ingest_entry(entry: CatalogueEntry) -> AudioClip:
    if entry.path is None:
        raise CatalogueError(f"entry {entry.clip_id!r} has no audio path")
    return ingest(entry.path, entry.clip_id)


def load(catalogue_dir: str | Path) -> Catalogue:
    """Open a previously built catalogue directory without recomputing."""
    out_dir = Path(catalogue_dir)
    meta_path = out_dir / META_FILENAME
    if not meta_path.exists():
        raise CatalogueError(f"{out_dir} is not a catalogue directory (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    cfg = MfccConfig(**meta["mfcc"])
    fingerprint = cache.config_fingerprint(cfg)
    if fingerprint != meta["fingerprint"]:
        raise cache.StaleCacheError(f"{out_dir}: meta fingerprint does not match configuration")
    entries = read_manifest(out_dir / MANIFEST_FILENAME)
    models = cache.read_models(out_dir / "models.bin", fingerprint)
    d_skl = cache.read_distance(out_dir / "dist_skl.bin", fingerprint)
    d_mp = None
    if (out_dir / "dist_mp.bin").exists():
        d_mp = cache.read_distance(out_dir / "dist_mp.bin", fingerprint)
    return Catalogue(entries, models, d_skl, d_mp, meta["k"], cfg, meta["reg"])
