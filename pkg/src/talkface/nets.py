"""Generator (identity/face/audio encoders, fusion, decoder) and discriminator.

The talking-face generator and the silent-lip generator share this topology;
they differ only in the losses they are trained with.  Image stacks are
channel-concatenated: 5 RGB frames -> 15 channels, frame-major.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.parametrizations import spectral_norm

from talkface.repro import state_checksum
from talkface.sync_scorer import EMBED_DIM, AudioTower, SyncScorer, conv_block

FEATURE_DIM = 512
ROLES = ("G_L", "G_S")
AUDIO_KINDS = ("scratch_cnn", "frozen_sync")


class CheckpointMismatch(ValueError):
    pass


class Encoder(nn.Module):
    """Six conv blocks: 96 -> 48 -> 24 -> 12 -> 6 -> 3 (x2), pooled to 512-d."""

    def __init__(self, in_ch: int = 15, width: int = 8):
        super().__init__()
        w = width
        self.channels = (w, 2 * w, 4 * w, 8 * w, 16 * w)
        chans = (in_ch,) + self.channels
        self.blocks = nn.ModuleList(conv_block(chans[i], chans[i + 1], 2) for i in range(5))
        self.head = conv_block(16 * w, FEATURE_DIM, 1)

    def forward(self, x):
        skips = []
        h = x
        for blk in self.blocks:
            h = blk(h)
            skips.append(h)
        h = self.head(h)
        return h.mean(dim=(2, 3)), skips


def up_block(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Decoder(nn.Module):
    """Transposed-conv blocks with BN + ReLU; face-encoder activations are added
    after each block at matching resolution."""

    def __init__(self, width: int = 8, out_ch: int = 15):
        super().__init__()
        w = width
        self.stem = nn.Sequential(
            nn.ConvTranspose2d(2 * FEATURE_DIM, 16 * w, 3, 1, 0, bias=False),  # 1 -> 3
            nn.BatchNorm2d(16 * w),
            nn.ReLU(inplace=True),
        )
        self.ups = nn.ModuleList(
            [up_block(16 * w, 8 * w), up_block(8 * w, 4 * w), up_block(4 * w, 2 * w), up_block(2 * w, w)]
        )
        self.final_up = up_block(w, w)  # 48 -> 96
        self.out = nn.Conv2d(w, out_ch, 3, 1, 1)

    def forward(self, z, skips):
        # skips: encoder outputs at 48, 24, 12, 6, 3
        h = self.stem(z[:, :, None, None]) + skips[4]
        for blk, skip in zip(self.ups, (skips[3], skips[2], skips[1], skips[0])):
            h = blk(h) + skip
        h = self.final_up(h)
        return torch.sigmoid(self.out(h))


class FrozenSyncAudioEncoder(nn.Module):
    """The sync scorer's audio tower, gradient-excluded and pinned to eval mode.

    Returns the pre-normalisation 512-d activation.
    """

    def __init__(self, tower: AudioTower):
        super().__init__()
        self.tower = tower
        self.tower.requires_grad_(False)
        self.tower.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, mel):
        return self.tower(mel)


def make_audio_encoder(kind: str, scorer: Optional[SyncScorer] = None, width: int = 16) -> nn.Module:
    if kind == "scratch_cnn":
        return AudioTower(width)
    if kind == "frozen_sync":
        if scorer is None:
            raise ValueError("frozen_sync audio encoder needs a trained sync-scorer checkpoint")
        return FrozenSyncAudioEncoder(copy.deepcopy(scorer.audio))
    raise ValueError(f"unknown audio encoder kind {kind!r}; expected one of {AUDIO_KINDS}")


@dataclass
class FusedFeatures:
    face: torch.Tensor  # F^I
    identity: torch.Tensor  # F^{I^R}
    audio: torch.Tensor  # F^A
    fused: torch.Tensor  # 512-d after the 1x1 conv
    decoder_input: torch.Tensor  # 1024-d
    skip_features: list


class Generator(nn.Module):
    def __init__(
        self,
        role: str = "G_L",
        audio_kind: str = "frozen_sync",
        width: int = 8,
        scorer: Optional[SyncScorer] = None,
        audio_width: int = 16,
    ):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.audio_kind = audio_kind
        self.width = width
        self.audio_width = audio_width
        self.sync_fingerprint = scorer.corpus_fingerprint if (scorer is not None and audio_kind == "frozen_sync") else None
        self.identity_encoder = Encoder(15, width)
        self.face_encoder = Encoder(15, width)
        if audio_kind == "frozen_sync" and scorer is None:
            # skeleton for checkpoint loading; weights arrive with load_state_dict
            self.audio_encoder = FrozenSyncAudioEncoder(AudioTower(audio_width))
        else:
            self.audio_encoder = make_audio_encoder(audio_kind, scorer, audio_width)
        self.fusion = nn.Conv2d(2 * FEATURE_DIM, FEATURE_DIM, 1)
        self.decoder = Decoder(width)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, masked: torch.Tensor, reference: torch.Tensor, mel: torch.Tensor) -> FusedFeatures:
        ref_stack = reference.repeat(1, 5, 1, 1) if reference.shape[1] == 3 else reference
        f_face, skips = self.face_encoder(masked)
        f_id, _ = self.identity_encoder(ref_stack)
        f_audio = self.audio_encoder(mel)
        cat = torch.cat([f_face, f_id], dim=1)[:, :, None, None]
        fused = self.fusion(cat).flatten(1)
        return FusedFeatures(
            face=f_face,
            identity=f_id,
            audio=f_audio,
            fused=fused,
            decoder_input=torch.cat([fused, f_audio], dim=1),
            skip_features=skips,
        )

    def forward(self, masked, reference, mel, zero_skips: bool = False):
        """masked (B,15,96,96), reference (B,3,96,96), mel (B,1,16,80) -> (B,15,96,96) in [0,1]."""
        feats = self.encode(masked, reference, mel)
        skips = feats.skip_features
        if zero_skips:
            skips = [torch.zeros_like(s) for s in skips]
        return self.decoder(feats.decoder_input, skips)

    def checksum(self) -> str:
        return state_checksum(self)

    def audio_checksum(self) -> str:
        return state_checksum(self.audio_encoder)

    # checkpoint ------------------------------------------------------------

    def save(self, path, step: int = 0, config_hash: Optional[str] = None, extra: Optional[dict] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "role": self.role,
                "audio_kind": self.audio_kind,
                "width": self.width,
                "audio_width": self.audio_width,
                "sync_fingerprint": self.sync_fingerprint,
                "step": step,
                "config_hash": config_hash,
                "state_dict": self.state_dict(),
                "extra": extra or {},
            },
            str(path),
        )
        return path

    @classmethod
    def load(cls, path, role: Optional[str] = None, audio_kind: Optional[str] = None) -> "Generator":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if role is not None and blob["role"] != role:
            raise CheckpointMismatch(f"{path}: checkpoint role {blob['role']} != expected {role}")
        if audio_kind is not None and blob["audio_kind"] != audio_kind:
            raise CheckpointMismatch(f"{path}: audio encoder {blob['audio_kind']} != expected {audio_kind}")
        g = cls(blob["role"], blob["audio_kind"], blob["width"], None, blob.get("audio_width", 16))
        g.load_state_dict(blob["state_dict"])
        g.sync_fingerprint = blob.get("sync_fingerprint")
        g.step = blob.get("step", 0)
        g.config_hash = blob.get("config_hash")
        g.extra = blob.get("extra", {})
        return g


class Discriminator(nn.Module):
    """Strided convs with spectral norm + LeakyReLU, sigmoid real/fake head."""

    def __init__(self, width: int = 8, in_ch: int = 15):
        super().__init__()
        w = width
        chans = (in_ch, w, 2 * w, 4 * w, 8 * w, 8 * w)
        layers = []
        for i in range(5):  # 96 -> 3
            layers += [spectral_norm(nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1)), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.head = spectral_norm(nn.Linear(8 * w * 9, 1))

    def forward(self, stack):
        return torch.sigmoid(self.head(self.body(stack).flatten(1))).squeeze(1)


# --------------------------------------------------------------------------
# numpy-facing helpers


def stack_to_tensor(stack: np.ndarray) -> torch.Tensor:
    """(..., 5, 96, 96, 3) or (..., 96, 96, 3) array -> channel-stacked NCHW tensor."""
    x = torch.as_tensor(np.asarray(stack, dtype=np.float32))
    if x.ndim == 3:
        return x.permute(2, 0, 1)[None]
    if x.ndim == 4 and x.shape[-1] == 3 and x.shape[0] == 5:
        return x.permute(0, 3, 1, 2).reshape(1, 15, x.shape[1], x.shape[2])
    if x.ndim == 4:
        return x.permute(0, 3, 1, 2)
    if x.ndim == 5:
        b, k, h, w, c = x.shape
        return x.permute(0, 1, 4, 2, 3).reshape(b, k * c, h, w)
    raise ValueError(f"unsupported stack shape {tuple(x.shape)}")


def tensor_to_stack(t: torch.Tensor) -> np.ndarray:
    """(B, 15, H, W) -> (B, 5, H, W, 3)."""
    b, c, h, w = t.shape
    return t.reshape(b, c // 3, 3, h, w).permute(0, 1, 3, 4, 2).detach().cpu().numpy()


@torch.no_grad()
def generator_forward(gen: Generator, masked_stack: np.ndarray, reference: np.ndarray, mel: np.ndarray) -> np.ndarray:
    """Inference-mode forward for one window: returns a (5, 96, 96, 3) stack."""
    masked_stack = np.asarray(masked_stack)
    reference = np.asarray(reference)
    mel = np.asarray(mel)
    if masked_stack.shape != (5, 96, 96, 3):
        raise ValueError(f"masked stack must be (5, 96, 96, 3), got {masked_stack.shape}")
    if reference.shape != (96, 96, 3):
        raise ValueError(f"reference must be (96, 96, 3), got {reference.shape}")
    if mel.shape != (16, 80):
        raise ValueError(f"mel must be (16, 80), got {mel.shape}")
    was_training = gen.training
    gen.eval()
    out = gen(stack_to_tensor(masked_stack), stack_to_tensor(reference), torch.as_tensor(mel, dtype=torch.float32)[None, None])
    gen.train(was_training)
    return tensor_to_stack(out)[0]


@torch.no_grad()
def discriminator_forward(disc: Discriminator, stack: np.ndarray) -> float:
    stack = np.asarray(stack)
    if stack.shape != (5, 96, 96, 3):
        raise ValueError(f"stack must be (5, 96, 96, 3), got {stack.shape}")
    was_training = disc.training
    disc.eval()
    p = float(disc(stack_to_tensor(stack))[0])
    disc.train(was_training)
    return p
