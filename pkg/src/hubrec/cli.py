"""Command-line entry point.

Progress goes to stderr, results to stdout or files. Exit codes: 0 on
success, 1 on domain errors (bad data, missing catalogue), 2 on usage
errors. Commands that write outputs also write the effective
configuration (after flag overrides) next to them.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import catalogue as cat
from .attack import AttackConfig, AttackOutcome, AttackVariant
from .audio_io import AudioIOError, load_wav, write_wav
from .cache import CacheError
from .catalogue import CatalogueError
from .evaluation import (
    ExperimentReport,
    attack_stream,
    grid_search,
    hubness_before_after,
    initial_hub_ids,
    posthoc_defence,
    render_table,
    run_experiment,
    summarize_outcomes,
)
from .features import MfccConfig
from .hubness import classify, k_occurrence, retrieval_accuracy
from .synth import SynthConfig, write_corpus

CACHE_DIR_ENV = "HUBREC_CACHE_DIR"

DomainErrors = (CatalogueError, CacheError, AudioIOError, ValueError, KeyError, OSError)


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    config = json.loads(Path(path).read_text())
    if not isinstance(config, dict):
        raise ValueError("config file must contain a JSON object")
    return config


def _mfcc_config(config: dict) -> MfccConfig:
    return MfccConfig(**config.get("mfcc", {}))


def _attack_config(config: dict, args) -> AttackConfig:
    section = dict(config.get("attack", {}))
    for name in ("epsilon", "eta", "alpha", "max_epochs"):
        value = getattr(args, name, None)
        if value is not None:
            section[name] = value
    return AttackConfig.for_variant(args.variant, **section)


def _write_effective_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"effective_config_{command}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _catalogue_dir(args) -> Path:
    value = getattr(args, "catalogue", None) or os.environ.get(CACHE_DIR_ENV)
    if not value:
        raise CatalogueError("no catalogue directory given (flag --catalogue or "
                             f"environment {CACHE_DIR_ENV})")
    return Path(value)


def _open_catalogue(args) -> cat.Catalogue:
    return cat.load(_catalogue_dir(args))


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_songs=args.n_songs, n_clusters=args.n_clusters,
                      duration=args.duration, seed=args.seed)
    manifest = write_corpus(cfg, args.out)
    _write_effective_config(Path(args.out), "synth", {"synth": asdict(cfg)})
    _log(f"wrote {cfg.n_songs} songs under {args.out}")
    print(manifest)
    return 0


def cmd_ingest(args) -> int:
    config = _load_config_file(args.config)
    mfcc_cfg = _mfcc_config(config)
    out_dir = _catalogue_dir(args)
    manifest = Path(args.manifest) if args.manifest else out_dir / cat.MANIFEST_FILENAME
    if manifest != out_dir / cat.MANIFEST_FILENAME:
        # Import an external manifest with audio paths resolved against its
        # own location, so the catalogue copy stays valid.
        entries = cat.read_manifest(manifest)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"id": e.clip_id, "path": str(e.path.resolve()),
                             "label": e.label}, sort_keys=True)
                 for e in entries]
        (out_dir / cat.MANIFEST_FILENAME).write_text("\n".join(lines) + "\n")
        manifest = out_dir / cat.MANIFEST_FILENAME
    _log(f"building catalogue from {manifest}")
    built = cat.build(manifest, mfcc_cfg, k=args.k, with_mp=not args.no_mp,
                      catalogue_dir=out_dir, overwrite_stale=args.refresh)
    _write_effective_config(out_dir, "ingest", {
        "mfcc": asdict(mfcc_cfg), "k": args.k, "with_mp": not args.no_mp,
    })
    _log(f"catalogue ready: {built.n} songs")
    return 0


def cmd_hubness(args) -> int:
    c = _open_catalogue(args)
    matrix = c.matrix(defended=args.defended)
    labels = c.labels
    accuracy = retrieval_accuracy(matrix, labels, c.k) if labels else None
    report = classify(k_occurrence(matrix, c.k), c.k, accuracy)
    print(report.to_json())
    return 0


def cmd_recommend(args) -> int:
    c = _open_catalogue(args)
    if args.k is not None:
        c.k = args.k
    for clip_id in cat.recommend(c, args.id, defended=args.defended):
        print(clip_id)
    return 0


def _resumable_ids(results_path: Path) -> set[str]:
    if not results_path.exists():
        return set()
    done = set()
    for line in results_path.read_text().splitlines():
        if line.strip():
            done.add(AttackOutcome.from_json(line).clip_id)
    return done


def cmd_attack(args) -> int:
    c = _open_catalogue(args)
    config = _load_config_file(args.config)
    attack_cfg = _attack_config(config, args)
    if attack_cfg.variant.defended_criterion and c.d_mp is None:
        raise CatalogueError("this variant needs an MP matrix; re-ingest without --no-mp")

    if args.ids_file:
        ids = [line.strip() for line in Path(args.ids_file).read_text().splitlines()
               if line.strip()]
    elif args.ids:
        ids = [part.strip() for part in args.ids.split(",") if part.strip()]
    else:
        hubs = set(initial_hub_ids(c, attack_cfg))
        ids = [clip_id for clip_id in c.ids if clip_id not in hubs]

    results_path = Path(args.out)
    results_path.parent.mkdir(parents=True, exist_ok=True)
    done = _resumable_ids(results_path)
    todo = [clip_id for clip_id in ids if clip_id not in done]
    if done:
        _log(f"resuming: {len(done)} songs already recorded, {len(todo)} to go")
    _write_effective_config(results_path.parent, "attack", {
        "attack": {**asdict(attack_cfg), "variant": attack_cfg.variant.value},
        "ids": ids,
    })

    adversarial_dir = Path(args.adversarial_dir) if args.adversarial_dir else None
    if adversarial_dir:
        adversarial_dir.mkdir(parents=True, exist_ok=True)
    with results_path.open("a") as sink:
        for i, (outcome, perturbed) in enumerate(
                attack_stream(c, todo, attack_cfg, workers=args.workers)):
            sink.write(outcome.to_json() + "\n")
            sink.flush()
            if outcome.success and adversarial_dir:
                write_wav(adversarial_dir / f"{outcome.clip_id}.wav", perturbed)
            _log(f"[{i + 1}/{len(todo)}] {outcome.clip_id}: "
                 f"{'success' if outcome.success else 'failed'} "
                 f"(occurrence {outcome.final_occurrence}, epochs {outcome.epochs_used})")
    return 0


def cmd_defend_eval(args) -> int:
    c = _open_catalogue(args)
    config = _load_config_file(args.config)
    variants = [AttackVariant(v) for v in args.variants.split(",")]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports: list[ExperimentReport] = []
    effective = {}
    for variant in variants:
        section = dict(config.get("attack", {}))
        if args.max_epochs is not None:
            section["max_epochs"] = args.max_epochs
        cfg = AttackConfig.for_variant(variant, **section)
        effective[variant.value] = {**asdict(cfg), "variant": variant.value}
        _log(f"running {variant.value} over {c.n} songs")
        run = run_experiment(
            c, cfg, workers=args.workers,
            progress=lambda i, total: _log(f"  {i}/{total}") if i % 10 == 0 else None,
        )
        stream = out_dir / f"outcomes_{variant.value}.jsonl"
        stream.write_text("".join(o.to_json() + "\n" for o in run.outcomes))
        if args.adversarial_dir and variant is AttackVariant.ORIGINAL:
            adv_dir = Path(args.adversarial_dir)
            adv_dir.mkdir(parents=True, exist_ok=True)
            for clip in run.adversarial_clips:
                write_wav(adv_dir / f"{clip.source_id}.wav", clip)
        reports.append(run.report)

    report_json = json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True)
    (out_dir / "report.json").write_text(report_json + "\n")
    table = render_table(reports)
    (out_dir / "report.txt").write_text(table + "\n")
    _write_effective_config(out_dir, "defend-eval", {"attack": effective})
    print(table)
    return 0


def cmd_posthoc(args) -> int:
    c = _open_catalogue(args)
    adversarial_dir = Path(args.adversarial_dir)
    clips = [load_wav(path) for path in sorted(adversarial_dir.glob("*.wav"))]
    if not clips:
        raise CatalogueError(f"no adversarial clips found in {adversarial_dir}")
    report = posthoc_defence(c, clips)
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n")
        _write_effective_config(Path(args.out).parent, "posthoc",
                                {"adversarial_dir": str(adversarial_dir)})
    print(payload)
    return 0


def cmd_sweep(args) -> int:
    c = _open_catalogue(args)
    grid = {
        "epsilon": [float(v) for v in args.epsilon.split(",")],
        "eta": [float(v) for v in args.eta.split(",")],
        "alpha": [float(v) for v in args.alpha.split(",")],
    }
    best, cells = grid_search(c, args.variant, grid, args.subset,
                              max_epochs=args.max_epochs or 500)
    payload = {
        "best": {**asdict(best), "variant": best.variant.value},
        "cells": [
            {"epsilon": eps, "eta": eta, "alpha": alpha, "successes": count}
            for (eps, eta, alpha), count in sorted(cells.items())
        ],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        _write_effective_config(Path(args.out).parent, "sweep", {"grid": grid})
    print(text)
    return 0


def cmd_report(args) -> int:
    c = _open_catalogue(args)
    reports = []
    for spec in args.results:
        if "=" in spec:
            variant_name, path = spec.split("=", 1)
        else:
            variant_name, path = Path(spec).stem.replace("outcomes_", ""), spec
        outcomes = [AttackOutcome.from_json(line)
                    for line in Path(path).read_text().splitlines() if line.strip()]
        cfg = AttackConfig.for_variant(variant_name)
        hubs = initial_hub_ids(c, cfg)
        reports.append(summarize_outcomes(variant_name, c.n, len(hubs), outcomes))
    print(json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True))
    print(render_table(reports))
    before, after = hubness_before_after(c)
    _log("hubness before MP: " + before.to_json())
    _log("hubness after MP:  " + after.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hubrec",
        description="Audio recommender, hubness attacks and the MP defence.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-songs", type=int, default=100)
    p.add_argument("--n-clusters", type=int, default=6)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a catalogue from a manifest")
    p.add_argument("--catalogue")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--no-mp", action="store_true")
    p.add_argument("--refresh", action="store_true",
                   help="recompute caches whose fingerprint is stale")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("hubness", help="print the hubness report")
    p.add_argument("--catalogue")
    p.add_argument("--defended", action="store_true")
    p.set_defaults(func=cmd_hubness)

    p = sub.add_parser("recommend", help="print the k nearest songs")
    p.add_argument("--catalogue")
    p.add_argument("--id", required=True)
    p.add_argument("-k", type=int, default=None)
    p.add_argument("--defended", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("attack", help="attack songs and append outcome records")
    p.add_argument("--catalogue")
    p.add_argument("--config")
    p.add_argument("--variant", required=True,
                   choices=[v.value for v in AttackVariant])
    p.add_argument("--ids-file")
    p.add_argument("--ids")
    p.add_argument("--out", required=True)
    p.add_argument("--adversarial-dir")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend-eval", help="run the full defence evaluation")
    p.add_argument("--catalogue")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--variants",
                   default="original,mod-kl,mod-mp,mod-mp-no-norm")
    p.add_argument("--adversarial-dir")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_defend_eval)

    p = sub.add_parser("posthoc", help="apply MP after adding adversarial songs")
    p.add_argument("--catalogue")
    p.add_argument("--adversarial-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_posthoc)

    p = sub.add_parser("sweep", help="grid search over attack parameters")
    p.add_argument("--catalogue")
    p.add_argument("--variant", required=True,
                   choices=[v.value for v in AttackVariant])
    p.add_argument("--epsilon", required=True, help="comma-separated values")
    p.add_argument("--eta", required=True, help="comma-separated values")
    p.add_argument("--alpha", required=True, help="comma-separated values")
    p.add_argument("--subset", type=int, default=10)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recount outcome streams into a report")
    p.add_argument("--catalogue")
    p.add_argument("--results", nargs="+", required=True,
                   help="outcome files, optionally as variant=path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DomainErrors as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
