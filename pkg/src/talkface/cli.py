"""Command-line entry point: ``talkface <subcommand> ...``.

Every subcommand writes everything under ``--out`` and leaves a
``manifest.json`` there that records the arguments, seed, config hash and
fingerprints of the inputs it consumed.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from talkface import __version__


def _versions() -> dict:
    import torch

    return {"talkface": __version__, "python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}


def _write_manifest(out: Path, args: argparse.Namespace, **fields) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {"command": args.command, "args": argv, "versions": _versions()}
    manifest.update(fields)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _load_train_config(args, stage: str):
    from talkface.train import TrainConfig, silent_generator_config

    if args.config:
        cfg = TrainConfig.from_json(args.config)
        if cfg.stage != stage:
            raise ValueError(f"config {args.config} is for stage {cfg.stage}, expected {stage}")
    else:
        cfg = silent_generator_config() if stage == "pretrain_gs" else TrainConfig()
    overrides = {}
    for key in ("seed", "batch_size", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides)


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found at {p}")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    from talkface.corpus import build_corpus

    corpus = build_corpus(args.clips, args.seed, num_frames=args.frames)
    corpus.save(args.out)
    return {"seed": args.seed, "corpus_fingerprint": corpus.fingerprint(), "clips": len(corpus)}


def cmd_train_sync(args) -> dict:
    from talkface.corpus import Corpus
    from talkface.sync_scorer import SyncTrainConfig, evaluate_auc, ClipTable, save_scorer, train_sync_scorer

    corpus = Corpus.load(_need(args.corpus, "corpus"))
    cfg = SyncTrainConfig(seed=args.seed, width=args.width)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    scorer = train_sync_scorer(corpus, cfg)
    path = save_scorer(scorer, Path(args.out) / "sync_scorer.pt", cfg)
    auc = evaluate_auc(scorer, ClipTable(corpus.split("val") or corpus.split("test")))
    return {
        "seed": args.seed,
        "config": cfg.to_dict(),
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint": str(path),
        "checksum": scorer.checksum(),
        "heldout_auc": auc,
    }


def cmd_pretrain_gs(args) -> dict:
    from talkface.corpus import Corpus
    from talkface.train import pretrain_silent_generator

    corpus = Corpus.load(_need(args.corpus, "corpus"))
    cfg = replace(_load_train_config(args, "pretrain_gs"), out_dir=str(args.out), log_path=None)
    res = pretrain_silent_generator(corpus, cfg)
    return {
        "seed": cfg.seed,
        "config_hash": res.config_hash,
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint": str(res.checkpoint),
        "checksum": res.generator.checksum(),
    }


def cmd_train_gl(args) -> dict:
    from talkface.corpus import Corpus
    from talkface.nets import Generator
    from talkface.sync_scorer import SyncScorer
    from talkface.train import train_talking_face

    corpus = Corpus.load(_need(args.corpus, "corpus"))
    cfg = replace(_load_train_config(args, "train_gl"), out_dir=str(args.out), log_path=None)
    scorer = SyncScorer.load(_need(args.sync, "sync-scorer checkpoint"), corpus.fingerprint()) if args.sync else None
    gs = Generator.load(_need(args.gs, "silent-lip generator checkpoint"), role="G_S") if args.gs else None
    res = train_talking_face(corpus, cfg, scorer, gs)
    return {
        "seed": cfg.seed,
        "config_hash": res.config_hash,
        "corpus_fingerprint": corpus.fingerprint(),
        "sync_checksum": scorer.checksum() if scorer else None,
        "gs_checksum": gs.checksum() if gs else None,
        "frozen_checksums": res.frozen_checksums,
        "checkpoint": str(res.checkpoint),
        "checksum": res.generator.checksum(),
    }


def cmd_infer(args) -> dict:
    from talkface.corpus import load_clip, read_wav
    from talkface.inference import HookConfig, InferenceJob, generate_video

    clip = load_clip(_need(args.clip, "source clip"))
    waveform = read_wav(_need(args.audio, "driving audio")) if args.audio else None
    hook = HookConfig("external", args.hook_cmd) if args.hook_cmd else HookConfig()
    job = InferenceJob(
        clip=clip,
        generator=_need(args.gl, "talking-face generator checkpoint"),
        silent_generator=_need(args.gs, "silent-lip generator checkpoint") if args.gs else None,
        waveform=waveform,
        hook=hook,
        out_root=args.out,
        job_id=args.job_id,
    )
    res = generate_video(job)
    return {"output": str(res.out_dir), "log": res.log}


def cmd_eval(args) -> dict:
    from talkface.corpus import load_clip, read_frames
    from talkface.metrics import evaluate_clips
    from talkface.sync_scorer import SyncScorer

    gen = read_frames(_need(args.gen, "generated frames"))
    gt = load_clip(_need(args.gt, "ground-truth clip"))
    if gen.shape[0] != gt.num_frames:
        raise ValueError(f"generated video has {gen.shape[0]} frames, ground truth has {gt.num_frames}")
    scorer = SyncScorer.load(_need(args.sync, "sync-scorer checkpoint")) if args.sync else None
    report = evaluate_clips([(gt.clip_id, gen, gt)], scorer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "metrics.txt").write_text(report.table() + "\n")
    print(report.table())
    return {"metrics": {k: getattr(report, k) for k in report.available}, "available": report.available}


def cmd_ablate(args) -> dict:
    from talkface.corpus import Corpus
    from talkface.nets import Generator
    from talkface.sync_scorer import SyncScorer
    from talkface.train import parse_labels, run_ablation

    labels = parse_labels(args.setups)
    corpus = Corpus.load(_need(args.corpus, "corpus"))
    scorer = SyncScorer.load(_need(args.sync, "sync-scorer checkpoint"), corpus.fingerprint())
    gs = Generator.load(_need(args.gs, "silent-lip generator checkpoint"), role="G_S") if args.gs else None
    base = replace(_load_train_config(args, "train_gl"), out_dir=str(args.out))
    report = run_ablation(corpus, labels, args.budget, scorer, gs, base=base, out_dir=args.out)
    print(report.markdown())
    return {
        "seed": base.seed,
        "budget": args.budget,
        "setups": labels,
        "corpus_fingerprint": corpus.fingerprint(),
        "sync_checksum": scorer.checksum(),
        "gs_checksum": gs.checksum() if gs else None,
        "report": str(Path(args.out) / "ablation_report.json"),
        "partial": report.partial,
    }


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="talkface", description="Desk-scale audio-driven talking-face generation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, seed_default=0):
        sp.add_argument("--out", type=Path, required=True, help="output directory (all files go here)")
        sp.add_argument("--seed", type=int, default=seed_default, help="root seed for this run")

    sp = sub.add_parser("synth", help="build a synthetic corpus")
    common(sp, seed_default=7)
    sp.add_argument("--clips", type=int, default=200, help="number of clips (default 200)")
    sp.add_argument("--frames", type=int, default=50, help="frames per clip (default 50)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-sync", help="train the audio/lip sync scorer")
    common(sp)
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--steps", type=int, default=None, help="training steps (default 2000)")
    sp.add_argument("--width", type=int, default=16, help="tower base width (default 16)")
    sp.set_defaults(func=cmd_train_sync)

    def train_flags(sp):
        sp.add_argument("--corpus", required=True, help="corpus directory")
        sp.add_argument("--config", default=None, help="JSON training config")
        sp.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="overrides the config")
        sp.add_argument("--steps", dest="max_steps", type=int, default=None, help="training steps (overrides the config)")
        sp.add_argument("--out", type=Path, required=True, help="output directory (all files go here)")

    sp = sub.add_parser("pretrain-gs", help="pre-train the silent-lip generator")
    train_flags(sp)
    sp.set_defaults(func=cmd_pretrain_gs)

    sp = sub.add_parser("train-gl", help="train the talking-face generator")
    train_flags(sp)
    sp.add_argument("--sync", default=None, help="frozen sync-scorer checkpoint")
    sp.add_argument("--gs", default=None, help="frozen silent-lip generator checkpoint")
    sp.set_defaults(func=cmd_train_gl)

    sp = sub.add_parser("infer", help="generate a video from a clip and driving audio")
    sp.add_argument("--clip", required=True, help="source clip directory (frames + audio.wav)")
    sp.add_argument("--audio", default=None, help="driving 16 kHz wav (default: the clip's own audio)")
    sp.add_argument("--gl", required=True, help="talking-face generator checkpoint")
    sp.add_argument("--gs", default=None, help="silent-lip generator checkpoint")
    sp.add_argument("--hook-cmd", dest="hook_cmd", default=None, help="external restoration command, run as CMD IN_DIR OUT_DIR")
    sp.add_argument("--job-id", dest="job_id", default="job", help="output subdirectory name")
    sp.add_argument("--out", type=Path, required=True, help="output root (frames go to OUT/JOB_ID)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score a generated video against ground truth")
    sp.add_argument("--gen", required=True, help="directory of generated frames")
    sp.add_argument("--gt", required=True, help="ground-truth clip directory")
    sp.add_argument("--sync", default=None, help="sync-scorer checkpoint (enables FID and LSE)")
    sp.add_argument("--out", type=Path, required=True, help="output directory for the report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare ablation setups")
    train_flags(sp)
    sp.add_argument("--sync", required=True, help="frozen sync-scorer checkpoint")
    sp.add_argument("--gs", default=None, help="silent-lip generator checkpoint (needed by D, E, F, G)")
    sp.add_argument("--setups", required=True, help="comma-separated labels, e.g. A,G")
    sp.add_argument("--budget", type=int, default=5000, help="training steps per setup (default 5000)")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        fields = args.func(args)
        out = Path(args.out)
        _write_manifest(out, args, **fields)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
