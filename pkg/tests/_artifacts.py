"""Cached heavy artifacts for the acceptance suite.

Everything lives under ``.cache/acceptance`` in the repository root (override
with ``TALKFACE_ACCEPTANCE_CACHE``).  Each getter loads the artifact when it is
present and builds it otherwise, so a cold run trains everything (several
hours on one CPU core).  Build ahead of time with::

    python tests/_artifacts.py all
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("TALKFACE_ACCEPTANCE_CACHE", ROOT / ".cache" / "acceptance"))

CORPUS_CLIPS = 200
CORPUS_SEED = 7
GS_STEPS = 4000
BUDGET = 5000
BATCH = 4
WIDTH = 8
STABILITY_SEEDS = (0, 1, 2, 3, 4)
ABLATION_LABELS = ("A", "B", "D", "E", "F", "G")

logger = logging.getLogger("acceptance")


def _timed_meta(path: Path, fn):
    t = time.perf_counter()
    out = fn()
    path.write_text(json.dumps({"wall_seconds": time.perf_counter() - t}))
    return out


def corpus():
    from talkface.corpus import Corpus, build_corpus

    root = CACHE / "corpus"
    if (root / "index.json").exists():
        return Corpus.load(root)
    c = build_corpus(CORPUS_CLIPS, CORPUS_SEED)
    c.save(root)
    return c


def sync_scorer():
    from talkface.sync_scorer import SyncScorer, SyncTrainConfig, save_scorer, train_sync_scorer

    c = corpus()
    path = CACHE / "sync.pt"
    if not path.exists():
        cfg = SyncTrainConfig()
        scorer = _timed_meta(CACHE / "sync_meta.json", lambda: train_sync_scorer(c, cfg))
        save_scorer(scorer, path, cfg)
    return SyncScorer.load(path, c.fingerprint())


def base_config(**overrides):
    from talkface.train import TrainConfig

    cfg = TrainConfig(batch_size=BATCH, width=WIDTH, max_steps=BUDGET, checkpoint_every=1000)
    return replace(cfg, **overrides)


def silent_generator():
    from talkface.nets import Generator
    from talkface.train import pretrain_silent_generator, silent_generator_config

    path = CACHE / "gs" / "gen_final.pt"
    if not path.exists():
        cfg = silent_generator_config(
            batch_size=BATCH, width=WIDTH, max_steps=GS_STEPS, seed=0, out_dir=str(CACHE / "gs")
        )
        _timed_meta(CACHE / "gs_meta.json", lambda: pretrain_silent_generator(corpus(), cfg))
    return Generator.load(path, role="G_S")


def ablation_report():
    from talkface.train import run_ablation

    path = CACHE / "ablation" / "ablation_report.json"
    if path.exists():
        return json.loads(path.read_text())
    report = run_ablation(
        corpus(), ABLATION_LABELS, BUDGET, sync_scorer(), silent_generator(),
        base=base_config(seed=0), out_dir=CACHE / "ablation",
    )
    return report.to_dict()


def setup_g_checkpoint():
    ablation_report()
    return CACHE / "ablation" / "G" / "gen_final.pt"


def stability_run(seed: int) -> Path:
    """Run directory of setup G with ``seed``; seed 0 is the ablation run itself."""
    from talkface.train import ablation_setup, train_talking_face

    if seed == 0:
        setup_g_checkpoint()
        return CACHE / "ablation" / "G"
    out = CACHE / "stability" / f"seed{seed}"
    if not (out / "gen_final.pt").exists():
        cfg = replace(ablation_setup("G", base_config(seed=seed)).config, out_dir=str(out))
        train_talking_face(corpus(), cfg, sync_scorer(), silent_generator())
    return out


def build_all():
    corpus()
    sync_scorer()
    silent_generator()
    ablation_report()
    for s in STABILITY_SEEDS:
        stability_run(s)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    what = sys.argv[1] if len(sys.argv) > 1 else "all"
    if what == "all":
        build_all()
    elif what == "stability":
        for s in STABILITY_SEEDS:
            stability_run(s)
    else:
        globals()[what]()
