from dataclasses import replace

import numpy as np
import pytest
import torch

from talkface.corpus import build_corpus
from talkface.sync_scorer import SyncScorer
from talkface.train import (
    TrainConfig,
    ablation_setup,
    pretrain_silent_generator,
    silent_generator_config,
    train_talking_face,
)


def tiny(**kw):
    """Train-config fields for few-step runs at minimal width."""
    base = dict(batch_size=2, max_steps=3, width=4, audio_width=4, checkpoint_every=2)
    base.update(kw)
    return base


@pytest.fixture(scope="session")
def small_corpus():
    """12 short clips: 10 train, 1 val, 1 test."""
    return build_corpus(12, seed=3, num_frames=36)


@pytest.fixture(scope="session")
def tiny_scorer(small_corpus):
    """Untrained but frozen scorer bound to ``small_corpus``."""
    torch.manual_seed(0)
    s = SyncScorer(width=4)
    s.corpus_fingerprint = small_corpus.fingerprint()
    return s.freeze()


@pytest.fixture(scope="session")
def gs_run(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("gs")
    return pretrain_silent_generator(small_corpus, silent_generator_config(**tiny(out_dir=str(out))))


@pytest.fixture(scope="session")
def g_run(small_corpus, tiny_scorer, gs_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("g")
    cfg = replace(ablation_setup("G", TrainConfig(**tiny())).config, out_dir=str(out))
    return train_talking_face(small_corpus, cfg, tiny_scorer, gs_run.generator)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
