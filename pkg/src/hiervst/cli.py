"""Command-line entry point: ``hiervst <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import load_and_resample, save_wav
from .config import HierVSTConfig
from .content import extract, make_extractor, write_feature_cache
from .data import TrainingData
from .errors import HierVSTError
from .perturbation import perturb

log = logging.getLogger("hiervst")


def _config(args) -> HierVSTConfig:
    if getattr(args, "config", None):
        return HierVSTConfig.load(args.config, args.preset)
    return HierVSTConfig.desk() if args.preset == "desk" else HierVSTConfig.full()


def cmd_perturb(args):
    cfg = _config(args)
    w = load_and_resample(args.inp, cfg.audio.sample_rate)
    out = perturb(w, cfg.perturb, np.random.default_rng(args.seed))
    save_wav(args.out, out)


def cmd_extract_features(args):
    from .pipeline import Manifest

    cfg = _config(args)
    cfg.content.backend = args.backend
    if args.command:
        cfg.content.command = args.command.split()
    if args.layer is not None:
        cfg.content.layer = args.layer
    extractor = make_extractor(cfg.content)
    manifest = Manifest.load(args.manifest)
    records = {}
    for rec in manifest.records:
        w = load_and_resample(rec.path, cfg.audio.sample_rate)
        records[rec.utt_id] = extract(w, extractor).values
    write_feature_cache(args.out, records)
    log.info("wrote %d feature records to %s", len(records), args.out)


def cmd_train(args):
    from .pipeline import Manifest
    from .trainer import Trainer, load_checkpoint, save_checkpoint

    if args.resume:
        trainer = load_checkpoint(args.resume)
        cfg = trainer.cfg
    else:
        cfg = _config(args)
        trainer = Trainer(cfg)
    manifest = Manifest.load(args.data_manifest)
    waves = [load_and_resample(r.path, cfg.audio.sample_rate) for r in manifest.records]
    data = TrainingData(waves, cfg, make_extractor(cfg.content), utt_ids=[r.utt_id for r in manifest.records])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")
    steps = args.steps if args.steps is not None else cfg.train.total_steps - trainer.step
    trainer.fit(data, max(0, steps), out_dir=out_dir, log_path=out_dir / "metrics.jsonl")
    save_checkpoint(trainer, out_dir / "latest.pt")


def cmd_convert(args):
    from .pipeline import ConversionRequest, convert

    req = ConversionRequest(args.source, args.target, args.temperature_l, args.temperature_a, args.seed,
                            tuple(args.extra_refs or ()))
    save_wav(args.out, convert(req, args.ckpt))


def cmd_eval(args):
    from .pipeline import Manifest, evaluate_manifest, write_report
    from .trainer import load_checkpoint

    report = evaluate_manifest(Manifest.load(args.manifest), load_checkpoint(args.ckpt),
                               max_pairs=args.max_pairs, seed=args.seed)
    write_report(report, args.report)
    print(json.dumps(report["aggregate"], indent=2))


def cmd_build_manifest(args):
    from .pipeline import build_manifest

    manifest = build_manifest(args.root, args.pattern)
    manifest.save(args.out)
    for item in manifest.skipped:
        log.warning("skipped %s: %s", item["path"], item["reason"])
    log.info("%d records, %d skipped", len(manifest), len(manifest.skipped))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiervst", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", choices=["full", "desk"], default="desk")
        return p

    p = with_config(sub.add_parser("perturb", help="speaker-perturb one WAV file"))
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)

    p = with_config(sub.add_parser("extract-features", help="write a content-feature cache"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=["stub", "external"], default="stub")
    p.add_argument("--command", help="external extractor command line")
    p.add_argument("--layer", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = with_config(sub.add_parser("train", help="train or resume a model"))
    p.add_argument("--data-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, help="steps to run (default: up to train.total_steps)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="zero-shot conversion")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--extra-refs", nargs="*", help="additional target references, averaged")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature-l", type=float, default=0.667)
    p.add_argument("--temperature-a", type=float, default=0.667)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="objective metrics over manifest pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-manifest", help="scan a directory of WAV files")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="**/*.wav")
    p.set_defaults(func=cmd_build_manifest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except HierVSTError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
