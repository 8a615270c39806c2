"""Experiment orchestration: attack sweeps, defence evaluation, reporting.

Initial hubs (songs already over the hub threshold under a variant's own
criterion) are excluded from the attacked set; aggregates are computed
over successful adversaries only. Reports carry deterministic work
counters instead of wall-clock timings so same-seed runs are
byte-identical.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, AttackOutcome, attack_song
from .audio_io import AudioClip
from .catalogue import Catalogue
from .gaussian import fit_gaussian
from .features import mfcc_forward
from .hubness import HubnessReport, classify, k_occurrence, retrieval_accuracy
from .mutual_proximity import mp_rescale, mp_rescale_incremental


@dataclass(frozen=True)
class ExperimentReport:
    variant: str
    n: int
    n_initial_hubs: int
    n_adversarial_hubs: int
    n_non_hubs: int
    snr_mean: float | None
    snr_std: float | None
    occurrence_mean: float | None
    occurrence_std: float | None
    total_epochs: int
    mean_epochs: float | None

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n": self.n,
            "n_initial_hubs": self.n_initial_hubs,
            "n_adversarial_hubs": self.n_adversarial_hubs,
            "n_non_hubs": self.n_non_hubs,
            "snr_mean": self.snr_mean,
            "snr_std": self.snr_std,
            "occurrence_mean": self.occurrence_mean,
            "occurrence_std": self.occurrence_std,
            "total_epochs": self.total_epochs,
            "mean_epochs": self.mean_epochs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


@dataclass(frozen=True)
class ExperimentRun:
    report: ExperimentReport
    outcomes: tuple[AttackOutcome, ...]
    initial_hub_ids: tuple[str, ...]
    adversarial_clips: tuple[AudioClip, ...]


@dataclass(frozen=True)
class PosthocRecord:
    clip_id: str
    occurrence: int
    reverted: bool


@dataclass(frozen=True)
class PosthocReport:
    n_total: int
    n_reverted: int
    records: tuple[PosthocRecord, ...]

    @property
    def reverted_fraction(self) -> float:
        return self.n_reverted / self.n_total

    def to_json_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_reverted": self.n_reverted,
            "reverted_fraction": self.reverted_fraction,
            "records": [
                {"clip_id": r.clip_id, "occurrence": r.occurrence, "reverted": r.reverted}
                for r in self.records
            ],
        }


_WORKER_STATE: dict = {}


def _init_worker(catalogue: Catalogue, cfg: AttackConfig) -> None:
    try:
        # The hot path is many tiny matrix ops; BLAS threads only contend
        # with the worker pool.
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass
    _WORKER_STATE["catalogue"] = catalogue
    _WORKER_STATE["cfg"] = cfg


def _attack_one(x_id: str):
    outcome, perturbed = attack_song(_WORKER_STATE["catalogue"], x_id, _WORKER_STATE["cfg"])
    return outcome, perturbed


def initial_hub_ids(c: Catalogue, cfg: AttackConfig) -> tuple[str, ...]:
    """Songs already over the hub threshold under the variant's criterion."""
    matrix = c.matrix(defended=cfg.variant.defended_criterion)
    occ = k_occurrence(matrix, cfg.k)
    return tuple(matrix.ids[i] for i in np.flatnonzero(occ >= cfg.hub_threshold))


def _aggregate(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def attack_stream(c: Catalogue, ids, cfg: AttackConfig, *, workers: int = 1):
    """Yield (outcome, perturbed clip) per song, preserving input order.

    With workers > 1 songs are attacked in a process pool; ordering and
    results are identical to the serial path.
    """
    ids = list(ids)
    if workers <= 1:
        for x_id in ids:
            yield attack_song(c, x_id, cfg)
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(c, cfg)) as pool:
        yield from pool.map(_attack_one, ids, chunksize=1)


def run_experiment(c: Catalogue, cfg: AttackConfig, *, workers: int = 1,
                   progress=None) -> ExperimentRun:
    """Attack every non-initial-hub song and aggregate the outcomes."""
    if cfg.variant.defended_criterion and c.d_mp is None:
        raise ValueError(f"variant {cfg.variant.value} needs the MP matrix; build with MP")
    hubs = initial_hub_ids(c, cfg)
    hub_set = set(hubs)
    attacked_ids = [clip_id for clip_id in c.ids if clip_id not in hub_set]

    results: list[tuple[AttackOutcome, AudioClip]] = []
    for i, result in enumerate(attack_stream(c, attacked_ids, cfg, workers=workers)):
        results.append(result)
        if progress is not None:
            progress(i + 1, len(attacked_ids))

    outcomes = tuple(outcome for outcome, _ in results)
    adversarial = tuple(clip for outcome, clip in results if outcome.success)
    report = summarize_outcomes(cfg.variant.value, c.n, len(hubs), outcomes)
    return ExperimentRun(report, outcomes, hubs, adversarial)


def summarize_outcomes(variant: str, n: int, n_initial_hubs: int,
                       outcomes: tuple[AttackOutcome, ...] | list[AttackOutcome]) -> ExperimentReport:
    """Table-style aggregation of an outcome stream (recount-friendly)."""
    successes = [o for o in outcomes if o.success]
    snr_mean, snr_std = _aggregate([o.snr_db for o in successes])
    occ_mean, occ_std = _aggregate([float(o.final_occurrence) for o in successes])
    total_epochs = sum(o.epochs_used for o in outcomes)
    return ExperimentReport(
        variant=variant,
        n=n,
        n_initial_hubs=n_initial_hubs,
        n_adversarial_hubs=len(successes),
        n_non_hubs=len(outcomes) - len(successes),
        snr_mean=snr_mean,
        snr_std=snr_std,
        occurrence_mean=occ_mean,
        occurrence_std=occ_std,
        total_epochs=total_epochs,
        mean_epochs=total_epochs / len(outcomes) if outcomes else None,
    )


def format_count(count: int, n: int) -> str:
    return f"{count:,} ({100.0 * count / n:.1f}%)"


def format_stat(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.1f} +- {std:.1f}"


def render_table(reports: list[ExperimentReport]) -> str:
    """Fixed-width text table with the defence-evaluation columns."""
    header = ["Adaptation", "# Initial Hubs", "# Adversarial Hubs", "# Non-hubs", "SNR", "O^k"]
    rows = [header]
    for r in reports:
        rows.append([
            r.variant,
            format_count(r.n_initial_hubs, r.n),
            format_count(r.n_adversarial_hubs, r.n),
            format_count(r.n_non_hubs, r.n),
            format_stat(r.snr_mean, r.snr_std),
            format_stat(r.occurrence_mean, r.occurrence_std),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def posthoc_defence(c: Catalogue, adversarial_clips, hub_threshold: int | None = None) -> PosthocReport:
    """Add each adversarial song to the clean catalogue, rescale, reclassify.

    A song reverts when its k-occurrence after incremental MP lands
    strictly between zero and the hub threshold.
    """
    clips = list(adversarial_clips)
    if not clips:
        raise ValueError("no adversarial clips given")
    threshold = 5 * c.k if hub_threshold is None else hub_threshold
    records = []
    for clip in clips:
        model = fit_gaussian(mfcc_forward(clip, c.mfcc_config), c.reg)
        row = c.stack.skl_row(model)
        _, aug_mp = mp_rescale_incremental(c.d_skl, row)
        occurrence = int(k_occurrence(aug_mp, c.k)[c.n])
        records.append(PosthocRecord(
            clip_id=clip.source_id,
            occurrence=occurrence,
            reverted=0 < occurrence < threshold,
        ))
    n_reverted = sum(r.reverted for r in records)
    return PosthocReport(len(records), n_reverted, tuple(records))


def grid_search(c: Catalogue, variant, grid: dict, subset_size: int, *,
                max_epochs: int = 500, k: int | None = None,
                hub_threshold: int | None = None, workers: int = 1):
    """Exhaustive sweep over epsilon/eta/alpha combinations.

    Each cell attacks the same deterministic subset (the first
    subset_size attackable songs in catalogue order). Returns the best
    config plus per-cell success counts; ties break toward higher mean
    SNR, then the lexicographically smallest (epsilon, eta, alpha).
    """
    epsilons = sorted(grid.get("epsilon", ()))
    etas = sorted(grid.get("eta", ()))
    alphas = sorted(grid.get("alpha", ()))
    if not (epsilons and etas and alphas):
        raise ValueError("grid must provide epsilon, eta and alpha values")

    extra = {}
    if k is not None:
        extra["k"] = k
    if hub_threshold is not None:
        extra["hub_threshold"] = hub_threshold

    base_cfg = AttackConfig.for_variant(variant, max_epochs=max_epochs, **extra)
    hubs = set(initial_hub_ids(c, base_cfg))
    subset = [clip_id for clip_id in c.ids if clip_id not in hubs][:subset_size]
    if not subset:
        raise ValueError("no attackable songs for the grid subset")

    cell_successes: dict[tuple[float, float, float], int] = {}
    best_key = None
    best_cfg = None
    for epsilon, eta, alpha in itertools.product(epsilons, etas, alphas):
        cfg = AttackConfig.for_variant(variant, epsilon=epsilon, eta=eta, alpha=alpha,
                                       max_epochs=max_epochs, **extra)
        outcomes = [outcome for outcome, _ in
                    attack_stream(c, subset, cfg, workers=workers)]
        successes = [o for o in outcomes if o.success]
        snrs = [o.snr_db for o in successes]
        mean_snr = float(np.mean(snrs)) if snrs else float("-inf")
        key = (len(successes), mean_snr)
        cell_successes[(epsilon, eta, alpha)] = len(successes)
        if best_key is None or key > best_key:
            best_key = key
            best_cfg = cfg
    return best_cfg, cell_successes


def hubness_before_after(c: Catalogue) -> tuple[HubnessReport, HubnessReport]:
    """Hubness summaries of the raw and MP-rescaled catalogue, side by side."""
    d_mp = c.d_mp if c.d_mp is not None else mp_rescale(c.d_skl)
    labels = c.labels
    r_skl = retrieval_accuracy(c.d_skl, labels, c.k) if labels else None
    r_mp = retrieval_accuracy(d_mp, labels, c.k) if labels else None
    before = classify(k_occurrence(c.d_skl, c.k), c.k, r_skl)
    after = classify(k_occurrence(d_mp, c.k), c.k, r_mp)
    return before, after
