"""Two-tower audio/lip synchrony scorer, trained once and then frozen.

The visual tower sees the lower half of five consecutive frames stacked
along channels (15 x 48 x 96); the audio tower sees a 16 x 80 log-mel window.
Both end in a 512-d activation, L2-normalised for similarity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from talkface.corpus import MASK_ROW, WINDOW_FRAMES, Corpus, clip_mels
from talkface.repro import derive_seed, seed_everything, state_checksum

logger = logging.getLogger(__name__)

EMBED_DIM = 512
VERSION = "sync-scorer/1"
# log-mel values live in [log(1e-5), ~1]; shift to roughly zero-mean, unit-ish scale
MEL_CENTER, MEL_SCALE = -6.0, 3.0


class SyncTrainingError(RuntimeError):
    pass


class FingerprintMismatch(RuntimeError):
    pass


def conv_block(cin, cout, stride, kernel=3, padding=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, padding, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class VisualTower(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            conv_block(15, w, (1, 2)),  # 48 x 48
            conv_block(w, 2 * w, 2),  # 24
            conv_block(2 * w, 4 * w, 2),  # 12
            conv_block(4 * w, 8 * w, 2),  # 6
            conv_block(8 * w, 16 * w, 2),  # 3
            nn.Conv2d(16 * w, EMBED_DIM, 3, 1, 0),  # 1
        )

    def forward(self, x):
        return self.net(x - 0.5).flatten(1)


class AudioTower(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            conv_block(1, w, 1),  # 16 x 80
            conv_block(w, 2 * w, (1, 2)),  # 16 x 40
            conv_block(2 * w, 4 * w, 2),  # 8 x 20
            conv_block(4 * w, 8 * w, 2),  # 4 x 10
            conv_block(8 * w, 16 * w, 2),  # 2 x 5
            nn.Conv2d(16 * w, EMBED_DIM, (2, 5), 1, 0),  # 1 x 1
        )

    def forward(self, mel):
        return self.net((mel - MEL_CENTER) / MEL_SCALE).flatten(1)


@dataclass(frozen=True)
class SyncEmbedding:
    vector: np.ndarray
    modality: str  # "audio" | "visual"

    def __post_init__(self):
        if self.vector.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must be {EMBED_DIM}-d")


def visual_input(lower_stacks: np.ndarray) -> torch.Tensor:
    """(B, 5, 48, 96, 3) lower-half stacks -> (B, 15, 48, 96) tensor."""
    x = torch.as_tensor(np.asarray(lower_stacks, dtype=np.float32))
    if x.ndim != 5 or tuple(x.shape[1:]) != (WINDOW_FRAMES, 96 - MASK_ROW, 96, 3):
        raise ValueError(f"expected (B, 5, 48, 96, 3) lower-half stacks, got {tuple(x.shape)}")
    b = x.shape[0]
    return x.permute(0, 1, 4, 2, 3).reshape(b, 15, 96 - MASK_ROW, 96)


def audio_input(mels: np.ndarray) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(mels, dtype=np.float32))
    if x.ndim != 3 or tuple(x.shape[1:]) != (16, 80):
        raise ValueError(f"expected (B, 16, 80) mels, got {tuple(x.shape)}")
    return x[:, None]


class SyncScorer(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.visual = VisualTower(width)
        self.audio = AudioTower(width)
        self.corpus_fingerprint: Optional[str] = None

    def forward(self, visual_x: torch.Tensor, mel_x: torch.Tensor):
        """Unit-norm (visual, audio) embeddings for tensor inputs."""
        return F.normalize(self.visual(visual_x), dim=1), F.normalize(self.audio(mel_x), dim=1)

    def embed_visual_tensor(self, lower: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.visual(lower), dim=1)

    def embed_audio_tensor(self, mel: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.audio(mel), dim=1)

    def freeze(self) -> "SyncScorer":
        self.requires_grad_(False)
        self.eval()
        self._frozen = True
        return self

    def train(self, mode: bool = True):
        if getattr(self, "_frozen", False):
            mode = False
        return super().train(mode)

    @torch.no_grad()
    def embed_visual_batch(self, lower_stacks: np.ndarray, batch: int = 64) -> np.ndarray:
        x = visual_input(lower_stacks)
        out = [self.embed_visual_tensor(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def embed_audio_batch(self, mels: np.ndarray, batch: int = 256) -> np.ndarray:
        x = audio_input(mels)
        out = [self.embed_audio_tensor(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
        return torch.cat(out).double().numpy()

    def frame_embedder(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame embedding: each frame's lower half replicated 5x."""
        frames = np.asarray(frames, dtype=np.float32)
        lower = frames[:, MASK_ROW:]
        stacks = np.repeat(lower[:, None], WINDOW_FRAMES, axis=1)
        return self.embed_visual_batch(stacks)

    def checksum(self) -> str:
        return state_checksum(self)

    # checkpoint ------------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        torch.save(
            {
                "version": VERSION,
                "width": self.width,
                "corpus_fingerprint": self.corpus_fingerprint,
                "state_dict": self.state_dict(),
                "extra": extra or {},
            },
            str(path),
        )

    @classmethod
    def load(cls, path, expected_fingerprint: Optional[str] = None) -> "SyncScorer":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if blob.get("version") != VERSION:
            raise ValueError(f"{path}: not a {VERSION} checkpoint")
        if expected_fingerprint is not None and blob["corpus_fingerprint"] != expected_fingerprint:
            raise FingerprintMismatch(
                f"sync scorer was trained on corpus {blob['corpus_fingerprint']}, "
                f"but the configured corpus is {expected_fingerprint}"
            )
        scorer = cls(width=blob["width"])
        scorer.load_state_dict(blob["state_dict"])
        scorer.corpus_fingerprint = blob["corpus_fingerprint"]
        return scorer.freeze()


def _check_unit(e: SyncEmbedding):
    n = float(np.linalg.norm(e.vector))
    if abs(n - 1.0) > 1e-5:
        raise ValueError(f"embedding is not unit-norm (|v| = {n:.7f})")


def embed_visual(lower_half_stack: np.ndarray, scorer: SyncScorer) -> SyncEmbedding:
    v = scorer.embed_visual_batch(np.asarray(lower_half_stack)[None])[0]
    return SyncEmbedding(vector=v, modality="visual")


def embed_audio(mel: np.ndarray, scorer: SyncScorer) -> SyncEmbedding:
    v = scorer.embed_audio_batch(np.asarray(mel)[None])[0]
    return SyncEmbedding(vector=v, modality="audio")


def cosine_similarity(a: SyncEmbedding, b: SyncEmbedding) -> float:
    _check_unit(a)
    _check_unit(b)
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


# --------------------------------------------------------------------------
# training


@dataclass
class SyncTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    width: int = 16
    seed: int = 0
    min_offset: int = 5
    max_offset: int = 15
    min_auc: float = 0.9
    min_train_clips: int = 100
    eval_every: int = 500

    def to_dict(self):
        return asdict(self)


class ClipTable:
    """Per-clip lower-half frames (uint8) and mel windows, indexable by start frame."""

    def __init__(self, clips):
        self.clip_ids = [c.clip_id for c in clips]
        self.lower = [np.round(c.frames[:, MASK_ROW:] * 255).astype(np.uint8) for c in clips]
        self.mels = [clip_mels(c) for c in clips]
        self.voiced = [bool(np.any(c.waveform != 0)) for c in clips]

    def __len__(self):
        return len(self.clip_ids)

    def n_starts(self, i: int) -> int:
        return self.mels[i].shape[0]

    def visual(self, i: int, s: int) -> np.ndarray:
        return self.lower[i][s : s + WINDOW_FRAMES].astype(np.float32) / 255.0


def _offset_start(rng, s: int, n_starts: int, lo: int, hi: int) -> Optional[int]:
    choices = [s + o for o in range(-hi, hi + 1) if abs(o) >= lo and 0 <= s + o < n_starts]
    if not choices:
        return None
    return int(choices[rng.integers(len(choices))])


def sample_pairs(table: ClipTable, rng: np.random.Generator, batch: int, lo: int, hi: int):
    """Half in-sync pairs; negatives split between temporal offsets and other clips."""
    vis, mel, label = [], [], []
    for k in range(batch):
        i = int(rng.integers(len(table)))
        s = int(rng.integers(table.n_starts(i)))
        vis.append(table.visual(i, s))
        if k % 2 == 0:
            mel.append(table.mels[i][s])
            label.append(1.0)
            continue
        s2 = _offset_start(rng, s, table.n_starts(i), lo, hi) if rng.random() < 0.5 else None
        if s2 is not None:
            mel.append(table.mels[i][s2])
        else:
            j = int(rng.integers(len(table) - 1))
            j = j + 1 if j >= i else j
            mel.append(table.mels[j][int(rng.integers(table.n_starts(j)))])
        label.append(0.0)
    return visual_input(np.stack(vis)), audio_input(np.stack(mel)), torch.tensor(label)


def sync_bce(v: torch.Tensor, a: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """BCE on the in-sync probability (1 + cos) / 2."""
    p = ((1.0 + (v * a).sum(dim=1)) / 2.0).clamp(1e-7, 1 - 1e-7)
    return F.binary_cross_entropy(p, label)


def heldout_pairs(table: ClipTable, seed: int, min_offset: int = 5, max_offset: int = 15):
    """Deterministic (visual_start, audio_start, label, clip index) evaluation pairs."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(len(table)):
        for s in range(table.n_starts(i)):
            pairs.append((i, s, s, 1))
            s2 = _offset_start(rng, s, table.n_starts(i), min_offset, max_offset)
            if s2 is not None:
                pairs.append((i, s, s2, 0))
    return pairs


@torch.no_grad()
def pair_similarities(scorer: SyncScorer, table: ClipTable, pairs) -> np.ndarray:
    vis = np.stack([table.visual(i, s) for i, s, _, _ in pairs])
    mel = np.stack([table.mels[i][s2] for i, _, s2, _ in pairs])
    v = scorer.embed_visual_batch(vis)
    a = scorer.embed_audio_batch(mel)
    return np.sum(v * a, axis=1)


def evaluate_auc(scorer: SyncScorer, table: ClipTable, seed: int = 0, min_offset: int = 5) -> float:
    from sklearn.metrics import roc_auc_score

    was_training = scorer.training
    scorer.eval()
    pairs = heldout_pairs(table, seed, min_offset)
    sims = pair_similarities(scorer, table, pairs)
    scorer.train(was_training)
    return float(roc_auc_score([p[3] for p in pairs], sims))


def offset_gap(scorer: SyncScorer, table: ClipTable, offset: int = 10) -> float:
    """mean S(in-sync) - mean S(audio `offset` frames later), over held-out windows."""
    pos, neg = [], []
    for i in range(len(table)):
        for s in range(table.n_starts(i) - offset):
            pos.append((i, s, s, 1))
            neg.append((i, s, s + offset, 0))
    return float(pair_similarities(scorer, table, pos).mean() - pair_similarities(scorer, table, neg).mean())


def train_sync_scorer(corpus: Corpus, cfg: SyncTrainConfig = SyncTrainConfig(), log=None) -> SyncScorer:
    train_clips = corpus.split("train")
    if len(train_clips) < cfg.min_train_clips:
        raise SyncTrainingError(f"need >= {cfg.min_train_clips} training clips, got {len(train_clips)}")
    table = ClipTable(train_clips)
    if not any(table.voiced):
        raise SyncTrainingError("no positive signal: every training clip is silent")
    heldout = ClipTable(corpus.split("val") or corpus.split("test"))

    seed_everything(derive_seed(cfg.seed, "sync-init"))
    scorer = SyncScorer(cfg.width)
    scorer.corpus_fingerprint = corpus.fingerprint()
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(derive_seed(cfg.seed, "sync-sampling"))
    scorer.train()
    for step in range(1, cfg.steps + 1):
        v_x, a_x, label = sample_pairs(table, rng, cfg.batch_size, cfg.min_offset, cfg.max_offset)
        v, a = scorer(v_x, a_x)
        loss = sync_bce(v, a, label)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        loss = loss.detach()
        if not torch.isfinite(loss):
            raise SyncTrainingError(f"non-finite sync loss at step {step}")
        if log is not None and (step % 50 == 0 or step == 1):
            log({"step": step, "bce": float(loss)})
        if cfg.eval_every and step % cfg.eval_every == 0:
            auc = evaluate_auc(scorer, heldout)
            logger.info("sync step %d bce %.4f held-out AUC %.4f", step, float(loss), auc)
            if log is not None:
                log({"step": step, "heldout_auc": auc})
    scorer.freeze()
    auc = evaluate_auc(scorer, heldout)
    if auc < cfg.min_auc:
        raise SyncTrainingError(
            f"held-out ROC-AUC {auc:.3f} < {cfg.min_auc} after {cfg.steps} steps; "
            "downstream sync losses would be meaningless"
        )
    return scorer


def save_scorer(scorer: SyncScorer, path, cfg: Optional[SyncTrainConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scorer.save(path, extra={"config": cfg.to_dict() if cfg else None, "checksum": scorer.checksum()})
    return path
