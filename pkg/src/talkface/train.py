"""Two-stage generator training and the A-G ablation harness.

Stage ``pretrain_gs`` trains the silent-lip generator with adversarial, pixel
and perceptual losses only.  Stage ``train_gl`` trains the talking-face
generator against the frozen sync scorer, optionally with silent references
produced by the frozen silent-lip generator.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from talkface.corpus import MASK_ROW, WINDOW_FRAMES, Corpus, clip_mels, mask_lower_half, silent_mel
from talkface.losses import (
    LossWeights,
    NonFiniteLossError,
    PerceptualConfig,
    PerceptualExtractor,
    adaptive_triplet_loss,
    adversarial_losses,
    cosine_distance,
    frames_of,
    perceptual_distance,
    pixel_loss,
    plain_sync_loss,
    plain_triplet_loss,
    pooled_features,
    stabilized_sync_loss,
    total_loss,
)
from talkface.nets import AUDIO_KINDS, Discriminator, Generator
from talkface.repro import config_hash, derive_seed, seed_everything
from talkface.sync_scorer import FingerprintMismatch, SyncScorer

logger = logging.getLogger(__name__)

STAGES = ("pretrain_gs", "train_gl", "train_sync")
SYNC_KINDS = ("none", "plain", "stabilized")
TRIPLET_KINDS = ("none", "plain", "adaptive")
LOG_FIELDS = (
    "step", "adv", "pixel", "perceptual", "stab_sync", "adaptive_triplet", "total",
    "mean_x", "mean_y", "mean_d", "wall_ms",
)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, component: str, last_good: Optional[Path]):
        super().__init__(
            f"{component} is non-finite at step {step}; "
            f"last good checkpoint: {last_good if last_good else 'none'}"
        )
        self.step = step
        self.component = component
        self.last_good = last_good


class FrozenComponentChanged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "train_gl"
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 16
    max_steps: int = 5000
    seed: int = 0
    audio_encoder_kind: str = "frozen_sync"
    sync_loss_kind: str = "stabilized"
    triplet_kind: str = "adaptive"
    use_silent_reference: bool = True
    width: int = 8
    audio_width: int = 16
    checkpoint_every: int = 1000
    out_dir: str = "runs/train"
    log_path: Optional[str] = None  # defaults to <out_dir>/train_log.ndjson
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    perceptual: dict = field(default_factory=lambda: asdict(PerceptualConfig()))

    def __post_init__(self):
        self.betas = tuple(self.betas)
        # JSON has no tuples; keep the in-memory form identical to a reloaded one
        self.perceptual = {k: list(v) if isinstance(v, tuple) else v for k, v in self.perceptual.items()}
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.audio_encoder_kind not in AUDIO_KINDS:
            raise ConfigError(f"audio_encoder_kind must be one of {AUDIO_KINDS}")
        if self.sync_loss_kind not in SYNC_KINDS:
            raise ConfigError(f"sync_loss_kind must be one of {SYNC_KINDS}")
        if self.triplet_kind not in TRIPLET_KINDS:
            raise ConfigError(f"triplet_kind must be one of {TRIPLET_KINDS}")
        if self.batch_size < 1 or self.max_steps < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, max_steps and checkpoint_every must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        w = self.loss_weights  # validates values
        if self.stage == "pretrain_gs":
            if self.sync_loss_kind != "none" or self.triplet_kind != "none" or self.use_silent_reference:
                raise ConfigError(
                    "pretrain_gs trains without sync/triplet losses and without silent references"
                )
            if w.sync != 0 or w.triplet != 0:
                raise ConfigError("pretrain_gs requires sync and triplet weights of 0")
            if self.audio_encoder_kind != "scratch_cnn":
                raise ConfigError("pretrain_gs uses a scratch audio encoder (no sync scorer is required)")

    @property
    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(**self.weights)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid loss weights: {exc}") from exc

    @property
    def perceptual_config(self) -> PerceptualConfig:
        cfg = dict(self.perceptual)
        for k in ("layers", "coefficients"):
            cfg[k] = tuple(cfg[k])
        return PerceptualConfig(**cfg)

    @property
    def needs_sync_scorer(self) -> bool:
        return self.sync_loss_kind != "none" or self.audio_encoder_kind == "frozen_sync"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def hash(self) -> str:
        """Hash of every field that can change results (output paths excluded)."""
        d = self.to_dict()
        for k in ("out_dir", "log_path", "checkpoint_every"):
            d.pop(k)
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def silent_generator_config(**overrides) -> TrainConfig:
    base = dict(
        stage="pretrain_gs",
        audio_encoder_kind="scratch_cnn",
        sync_loss_kind="none",
        triplet_kind="none",
        use_silent_reference=False,
        weights=asdict(LossWeights().for_silent_generator()),
    )
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# data


class WindowSampler:
    """Deterministic random 5-frame windows with an out-of-window reference frame."""

    def __init__(self, clips, seed: int):
        if not clips:
            raise ConfigError("no training clips")
        self.clips = clips
        self.frames = [np.round(c.frames * 255.0).astype(np.uint8) for c in clips]
        self.mels = [clip_mels(c) for c in clips]
        self.rng = np.random.default_rng(seed)

    def sample(self, batch: int) -> dict:
        gt, ref, mel, keys = [], [], [], []
        for _ in range(batch):
            i = int(self.rng.integers(len(self.clips)))
            n = self.frames[i].shape[0]
            s = int(self.rng.integers(n - WINDOW_FRAMES + 1))
            r = int(self.rng.integers(n - WINDOW_FRAMES))
            r = r + WINDOW_FRAMES if r >= s else r
            gt.append(self.frames[i][s : s + WINDOW_FRAMES])
            ref.append(self.frames[i][r])
            mel.append(self.mels[i][s])
            keys.append((self.clips[i].clip_id, r))
        gt = np.stack(gt).astype(np.float32) / 255.0
        return {
            "gt": gt,  # (B, 5, 96, 96, 3)
            "reference": np.stack(ref).astype(np.float32) / 255.0,
            "mel": np.stack(mel),
            "keys": keys,
        }


def _stack_tensor(stacks: np.ndarray) -> torch.Tensor:
    """(B, 5, H, W, 3) -> (B, 15, H, W)."""
    t = torch.as_tensor(stacks)
    b, k, h, w, c = t.shape
    return t.permute(0, 1, 4, 2, 3).reshape(b, k * c, h, w).contiguous()


def _frame_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(frames).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# silent references


def make_silent_reference(gs: Generator, reference: np.ndarray) -> np.ndarray:
    """Center frame of the silent-lip generator's output for silent audio.

    ``reference`` is one (96, 96, 3) frame or a (B, 96, 96, 3) batch.
    """
    ref = np.asarray(reference, dtype=np.float32)
    single = ref.ndim == 3
    if single:
        ref = ref[None]
    if ref.shape[1:] != (96, 96, 3):
        raise ValueError(f"reference must be (96, 96, 3), got {ref.shape[1:]}")
    stacks = np.repeat(ref[:, None], WINDOW_FRAMES, axis=1)
    masked = _stack_tensor(mask_lower_half(stacks))
    mel = torch.as_tensor(silent_mel(), dtype=torch.float32)[None, None].expand(ref.shape[0], 1, 16, 80)
    was_training = gs.training
    gs.eval()
    with torch.no_grad():
        out = gs(masked, _frame_tensor(ref), mel)
    gs.train(was_training)
    center = out[:, 3 * (WINDOW_FRAMES // 2) : 3 * (WINDOW_FRAMES // 2) + 3]
    result = center.permute(0, 2, 3, 1).numpy()
    return result[0] if single else result


class SilentReferenceCache:
    """Silent references keyed by (silent-lip generator checksum, clip, frame)."""

    def __init__(self, gs: Generator):
        self.gs = gs
        self.gs_checksum = gs.checksum()
        self._store = {}

    def get(self, keys, references: np.ndarray) -> np.ndarray:
        missing = [i for i, k in enumerate(keys) if (self.gs_checksum,) + tuple(k) not in self._store]
        if missing:
            out = make_silent_reference(self.gs, references[missing])
            for j, i in enumerate(missing):
                self._store[(self.gs_checksum,) + tuple(keys[i])] = out[j].astype(np.float16)
        return np.stack([self._store[(self.gs_checksum,) + tuple(k)].astype(np.float32) for k in keys])

    def __len__(self):
        return len(self._store)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    generator: Generator
    checkpoint: Path
    log_path: Path
    config_hash: str
    steps: int
    nonfinite_events: int
    frozen_checksums: dict
    wall_seconds: float


def _lower(stack: torch.Tensor) -> torch.Tensor:
    return stack[:, :, MASK_ROW:, :]


class _Trainer:
    def __init__(self, corpus: Corpus, cfg: TrainConfig, scorer: Optional[SyncScorer], gs: Optional[Generator]):
        self.cfg = cfg
        self.weights = cfg.loss_weights
        self.scorer = scorer
        self.gs = gs
        role = "G_S" if cfg.stage == "pretrain_gs" else "G_L"
        seed_everything(derive_seed(cfg.seed, role, "init"))
        self.gen = Generator(role, cfg.audio_encoder_kind, cfg.width, scorer, cfg.audio_width)
        self.disc = Discriminator(cfg.width)
        self.extractor = PerceptualExtractor(cfg.perceptual_config)
        self.opt_g = torch.optim.Adam(self.gen.trainable_parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.sampler = WindowSampler(corpus.split("train"), derive_seed(cfg.seed, role, "batches"))
        self.silent_cache = SilentReferenceCache(gs) if (gs is not None and cfg.use_silent_reference) else None

    def frozen_checksums(self) -> dict:
        sums = {}
        if self.scorer is not None:
            sums["sync_scorer"] = self.scorer.checksum()
        if self.gs is not None:
            sums["silent_generator"] = self.gs.checksum()
        if self.cfg.audio_encoder_kind == "frozen_sync":
            sums["audio_encoder"] = self.gen.audio_checksum()
        return sums

    def step(self, step: int) -> dict:
        cfg, w = self.cfg, self.weights
        batch = self.sampler.sample(cfg.batch_size)
        ref_np = batch["reference"]
        if self.silent_cache is not None:
            ref_np = self.silent_cache.get(batch["keys"], ref_np)
        gt = _stack_tensor(batch["gt"])
        masked = gt.clone()
        masked[:, :, MASK_ROW:, :] = 0.0
        ref = _frame_tensor(ref_np)
        mel = torch.as_tensor(batch["mel"], dtype=torch.float32)[:, None]

        # generator step, discriminator frozen in eval (no power-iteration update)
        self.gen.train()
        self.disc.eval()
        self.disc.requires_grad_(False)
        fake = self.gen(masked, ref, mel)
        adv_g, _ = adversarial_losses(torch.ones(1), self.disc(fake))

        pixel = pixel_loss(fake, gt)
        feats_fake = self.extractor(frames_of(fake))
        with torch.no_grad():
            feats_gt = self.extractor(frames_of(gt))
        perceptual = perceptual_distance(feats_fake, feats_gt, self.extractor.cfg.coefficients)

        components = {"adv": adv_g, "pixel": pixel, "perceptual": perceptual}
        stats = {"mean_x": None, "mean_y": None, "mean_d": None}
        zero = fake.new_zeros(())
        components["stab_sync"] = zero
        if cfg.sync_loss_kind != "none":
            ref_stack = ref.repeat(1, WINDOW_FRAMES, 1, 1)
            with torch.no_grad():
                a = self.scorer.embed_audio_tensor(mel)
                y = (self.scorer.embed_visual_tensor(_lower(gt)) * a).sum(1)
                d = (self.scorer.embed_visual_tensor(_lower(ref_stack)) * a).sum(1)
            x = (self.scorer.embed_visual_tensor(_lower(fake)) * a).sum(1)
            if cfg.sync_loss_kind == "stabilized":
                components["stab_sync"] = stabilized_sync_loss(x, y, d, w.eps_ss).mean()
            else:
                components["stab_sync"] = plain_sync_loss(x).mean()
            stats = {"mean_x": float(x.detach().mean()), "mean_y": float(y.mean()), "mean_d": float(d.mean())}

        components["adaptive_triplet"] = zero
        if cfg.triplet_kind != "none":
            f_fake = pooled_features(feats_fake, WINDOW_FRAMES)
            with torch.no_grad():
                f_gt = pooled_features(feats_gt, WINDOW_FRAMES)
                f_ref = pooled_features(self.extractor(ref))
            d_gg = cosine_distance(f_fake, f_gt)
            d_gr = cosine_distance(f_fake, f_ref)
            if cfg.triplet_kind == "adaptive":
                d_tr = cosine_distance(f_gt, f_ref)
                at = adaptive_triplet_loss(d_gg, d_gr, d_tr, w.alpha, w.eps_at, w.denom_floor)
            else:
                at = plain_triplet_loss(d_gg, d_gr, w.alpha, w.eps_at)
            components["adaptive_triplet"] = at.mean()

        bundle = total_loss(components, w)
        self.opt_g.zero_grad(set_to_none=True)
        bundle.total.backward()
        self.opt_g.step()

        # discriminator step
        self.disc.requires_grad_(True)
        self.disc.train()
        _, adv_d = adversarial_losses(self.disc(gt), self.disc(fake.detach()))
        if not torch.isfinite(adv_d):
            raise NonFiniteLossError("discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        adv_d.backward()
        self.opt_d.step()

        rec = {"step": step}
        rec.update({k: float(v) for k, v in bundle.as_floats().items()})
        rec.update(stats)
        rec["disc"] = float(adv_d.detach())
        return rec


def _train(corpus: Corpus, cfg: TrainConfig, scorer=None, gs=None, on_step: Optional[Callable] = None) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.log_path) if cfg.log_path else out_dir / "train_log.ndjson"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    cfg.save(out_dir / "config.json")

    trainer = _Trainer(corpus, cfg, scorer, gs)
    frozen_before = trainer.frozen_checksums()
    extra = {"config": cfg.to_dict(), "frozen_checksums": frozen_before,
             "use_silent_reference": cfg.use_silent_reference}
    last_good: Optional[Path] = None
    t0 = time.perf_counter()
    with open(log_path, "w") as log:
        for step in range(1, cfg.max_steps + 1):
            t_step = time.perf_counter()
            try:
                rec = trainer.step(step)
            except NonFiniteLossError as exc:
                log.write(json.dumps({"step": step, "event": "non_finite", "component": exc.component}) + "\n")
                log.flush()
                raise TrainingDiverged(step, exc.component, last_good) from exc
            rec["wall_ms"] = (time.perf_counter() - t_step) * 1000.0
            log.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if step % cfg.checkpoint_every == 0 and step != cfg.max_steps:
                last_good = trainer.gen.save(out_dir / "gen_last.pt", step, chash, extra)
                log.flush()
                if step % (cfg.checkpoint_every * 5) == 0:
                    logger.info("%s step %d total %.4f", trainer.gen.role, step, rec["total"])
    frozen_after = trainer.frozen_checksums()
    if frozen_after != frozen_before:
        raise FrozenComponentChanged(f"frozen parameters changed during training: {frozen_before} -> {frozen_after}")
    extra["frozen_checksums"] = frozen_after
    final = trainer.gen.save(out_dir / "gen_final.pt", cfg.max_steps, chash, extra)
    trainer.gen.extra, trainer.gen.config_hash, trainer.gen.step = extra, chash, cfg.max_steps
    return TrainResult(
        generator=trainer.gen,
        checkpoint=final,
        log_path=log_path,
        config_hash=chash,
        steps=cfg.max_steps,
        nonfinite_events=0,
        frozen_checksums=frozen_after,
        wall_seconds=time.perf_counter() - t0,
    )


def pretrain_silent_generator(corpus: Corpus, cfg: TrainConfig, on_step: Optional[Callable] = None) -> TrainResult:
    if cfg.stage != "pretrain_gs":
        raise ConfigError(f"pretrain_silent_generator needs stage pretrain_gs, got {cfg.stage}")
    return _train(corpus, cfg, None, None, on_step)


def train_talking_face(
    corpus: Corpus,
    cfg: TrainConfig,
    scorer: Optional[SyncScorer],
    gs: Optional[Generator] = None,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    if cfg.stage != "train_gl":
        raise ConfigError(f"train_talking_face needs stage train_gl, got {cfg.stage}")
    if cfg.needs_sync_scorer:
        if scorer is None:
            raise ConfigError("this configuration needs a frozen sync-scorer checkpoint")
        if scorer.corpus_fingerprint != corpus.fingerprint():
            raise FingerprintMismatch(
                f"sync scorer was trained on corpus {scorer.corpus_fingerprint}, "
                f"refusing to train on corpus {corpus.fingerprint()}"
            )
        scorer.freeze()
    if cfg.use_silent_reference:
        if gs is None:
            raise ConfigError("use_silent_reference needs a frozen silent-lip generator checkpoint")
        if gs.role != "G_S":
            raise ConfigError(f"silent references need a G_S checkpoint, got role {gs.role}")
        gs.requires_grad_(False)
        gs.eval()
    elif gs is not None:
        raise ConfigError("a silent-lip generator was given but use_silent_reference is false")
    return _train(corpus, cfg, scorer, gs, on_step)


def read_log(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def count_nonfinite(records) -> int:
    n = 0
    for r in records:
        if r.get("event") == "non_finite":
            n += 1
            continue
        if any(isinstance(r.get(k), float) and not math.isfinite(r[k]) for k in LOG_FIELDS):
            n += 1
    return n


# --------------------------------------------------------------------------
# ablation


class SetupUnavailable(ValueError):
    pass


ABLATION_LABELS = ("A", "B", "C", "D", "E", "F", "G")
_SETUPS = {
    "A": dict(audio_encoder_kind="scratch_cnn", sync_loss_kind="plain", triplet_kind="none", use_silent_reference=False),
    "B": dict(audio_encoder_kind="frozen_sync", sync_loss_kind="plain", triplet_kind="none", use_silent_reference=False),
    "D": dict(audio_encoder_kind="frozen_sync", sync_loss_kind="plain", triplet_kind="none", use_silent_reference=True),
    "E": dict(audio_encoder_kind="frozen_sync", sync_loss_kind="stabilized", triplet_kind="none", use_silent_reference=True),
    "F": dict(audio_encoder_kind="frozen_sync", sync_loss_kind="stabilized", triplet_kind="plain", use_silent_reference=True),
    "G": dict(audio_encoder_kind="frozen_sync", sync_loss_kind="stabilized", triplet_kind="adaptive", use_silent_reference=True),
}
C_UNAVAILABLE = "unavailable: external pretrained speech encoder out of scope"

# (from, to, metric): the direction the full-scale ablation reports
ABLATION_DIRECTIONS = (
    ("A", "B", "ssim"), ("A", "B", "lse_d"),
    ("B", "D", "lmd"), ("B", "D", "lse_d"),
    ("D", "E", "ssim"), ("D", "E", "lse_d"),
    ("F", "G", "ssim"),
    ("A", "G", "ssim"), ("A", "G", "fid"), ("A", "G", "lse_d"), ("A", "G", "ifc"),
)
HIGHER_IS_BETTER = {"ssim": True, "psnr": True, "lse_c": True, "fid": False, "lmd": False, "lse_d": False, "ifc": False}


@dataclass(frozen=True)
class AblationSetup:
    label: str
    config: TrainConfig


def ablation_setup(label: str, base: Optional[TrainConfig] = None) -> AblationSetup:
    label = label.strip().upper()
    if label == "C":
        raise SetupUnavailable(C_UNAVAILABLE)
    if label not in _SETUPS:
        raise SetupUnavailable(f"unknown ablation setup {label!r}; expected one of {ABLATION_LABELS}")
    base = base or TrainConfig()
    return AblationSetup(label, replace(base, stage="train_gl", **_SETUPS[label]))


def direction_indicators(metrics: dict) -> list:
    """Compare setups pairwise along the reference directions present in ``metrics``."""
    rows = []
    for a, b, m in ABLATION_DIRECTIONS:
        if a not in metrics or b not in metrics:
            continue
        va, vb = metrics[a].get(m), metrics[b].get(m)
        if va is None or vb is None:
            rows.append({"from": a, "to": b, "metric": m, "from_value": va, "to_value": vb, "improved": None})
            continue
        improved = vb > va if HIGHER_IS_BETTER[m] else vb < va
        rows.append({"from": a, "to": b, "metric": m, "from_value": va, "to_value": vb, "improved": bool(improved)})
    return rows


@dataclass
class AblationReport:
    budget: int
    seed: int
    metrics: dict  # label -> metric dict
    errors: dict  # label -> message
    directions: list
    partial: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def markdown(self) -> str:
        from talkface.metrics import DESK_SCALE_BANNER

        cols = ("ssim", "psnr", "fid", "lmd", "lse_c", "lse_d", "ifc")
        lines = [DESK_SCALE_BANNER, "", f"budget {self.budget} steps, seed {self.seed}", ""]
        lines.append("| setup | " + " | ".join(cols) + " |")
        lines.append("|---" * (len(cols) + 1) + "|")
        for label in sorted(self.metrics):
            vals = self.metrics[label]
            cells = ["n/a" if vals.get(c) is None else f"{vals[c]:.4f}" for c in cols]
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        for label, msg in sorted(self.errors.items()):
            lines.append(f"| {label} | {msg} |")
        if self.directions:
            lines += ["", "| change | metric | from | to | direction |", "|---|---|---|---|---|"]
            for r in self.directions:
                mark = {True: "improved", False: "regressed", None: "n/a"}[r["improved"]]
                fv = "n/a" if r["from_value"] is None else f"{r['from_value']:.4f}"
                tv = "n/a" if r["to_value"] is None else f"{r['to_value']:.4f}"
                lines.append(f"| {r['from']}->{r['to']} | {r['metric']} | {fv} | {tv} | {mark} |")
        if self.partial:
            lines += ["", "PARTIAL REPORT: at least one setup failed."]
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation_report.json").write_text(json.dumps(self.to_dict(), indent=2))
        (out_dir / "ablation_report.md").write_text(self.markdown())
        return out_dir / "ablation_report.json"


def evaluate_generator(corpus: Corpus, gen: Generator, scorer: SyncScorer, gs: Optional[Generator], split: str = "test") -> dict:
    """Generate every clip of ``split`` from its own audio and score it against GT."""
    from talkface.inference import render_clip
    from talkface.metrics import evaluate_clips

    pairs = []
    for clip in corpus.split(split):
        frames = render_clip(gen, gs, clip, clip.waveform)
        pairs.append((clip.clip_id, frames, clip))
    report = evaluate_clips(pairs, scorer)
    return report.to_dict()


def parse_labels(labels) -> list:
    if isinstance(labels, str):
        labels = labels.split(",")
    return [l.strip().upper() for l in labels if l.strip()]


def run_ablation(
    corpus: Corpus,
    labels,
    budget: int,
    scorer: SyncScorer,
    gs: Optional[Generator],
    base: Optional[TrainConfig] = None,
    out_dir=None,
    reuse: bool = True,
) -> AblationReport:
    """Train each requested setup with the same seed/budget and compare on the test split.

    Setup C is rejected up front.  A setup that crashes is recorded and the
    report is marked partial.  With ``reuse``, a finished run whose final
    checkpoint carries the same config hash is evaluated without retraining.
    """
    labels = parse_labels(labels)
    if "C" in labels:
        raise SetupUnavailable(C_UNAVAILABLE)
    setups = [ablation_setup(l, base) for l in labels]  # validates labels before any training
    base = base or TrainConfig()
    out_root = Path(out_dir or base.out_dir)
    metrics, errors = {}, {}
    for setup in setups:
        cfg = replace(setup.config, max_steps=budget, out_dir=str(out_root / setup.label), log_path=None)
        final = Path(cfg.out_dir) / "gen_final.pt"
        try:
            if reuse and final.exists() and Generator.load(final).config_hash == cfg.hash():
                gen = Generator.load(final, role="G_L")
            else:
                res = train_talking_face(corpus, cfg, scorer, gs if cfg.use_silent_reference else None)
                gen = res.generator
            metrics[setup.label] = evaluate_generator(corpus, gen, scorer, gs if cfg.use_silent_reference else None)
        except Exception as exc:  # recorded, report marked partial
            logger.exception("ablation setup %s failed", setup.label)
            errors[setup.label] = f"{type(exc).__name__}: {exc}"
    report = AblationReport(
        budget=budget,
        seed=base.seed,
        metrics=metrics,
        errors=errors,
        directions=direction_indicators(metrics),
        partial=bool(errors),
    )
    report.save(out_root)
    return report
