"""Training objectives for the silent-lip and talking-face generators.

Scalar losses accept python floats or torch tensors (elementwise over a batch)
and return the same kind.  Everything that is averaged over a batch is
averaged by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

_SIM_TOL = 1e-5


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str):
        super().__init__(f"{component} is non-finite")
        self.component = component


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 10.0  # lambda_1
    perceptual: float = 1.0  # lambda_2
    sync: float = 2.0  # lambda_3
    triplet: float = 0.5  # lambda_4
    eps_ss: float = 1e-8
    eps_at: float = 1e-8
    alpha: float = 1.0
    denom_floor: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")
        for name in ("eps_ss", "eps_at", "denom_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def for_silent_generator(self) -> "LossWeights":
        return replace(self, sync=0.0, triplet=0.0)


def _wrap(*values):
    """Return (tensors, was_scalar)."""
    scalar = all(not isinstance(v, torch.Tensor) for v in values)
    if scalar:
        return [torch.tensor(float(v), dtype=torch.float64) for v in values], True
    ref = next(v for v in values if isinstance(v, torch.Tensor))
    return [v if isinstance(v, torch.Tensor) else torch.as_tensor(v, dtype=ref.dtype) for v in values], False


def _unwrap(t: torch.Tensor, scalar: bool):
    return float(t) if scalar else t


def _check_similarity(name: str, v: torch.Tensor) -> torch.Tensor:
    v_ = v.detach()
    if not torch.isfinite(v_).all():
        raise ValueError(f"similarity {name} is non-finite")
    if (v_.abs() > 1.0 + _SIM_TOL).any():
        raise ValueError(f"similarity {name} outside [-1, 1]: {float(v_.abs().max()):.6f}")
    return v.clamp(-1.0, 1.0)


# --------------------------------------------------------------------------
# synchronization


def stabilized_sync_loss(x, y, d, eps: float = 1e-8):
    """-log(1 - (e^|x-y| + eps) / (e^|x-y| + e^|y-d| + eps)).

    x: generated-audio similarity, y: ground truth-audio, d: reference-audio.
    Evaluated through the equivalent ``log(e^a + e^b + eps) - b``, which stays
    finite for every in-range input.
    """
    (x, y, d), scalar = _wrap(x, y, d)
    x = _check_similarity("x", x)
    y = _check_similarity("y", y)
    d = _check_similarity("d", d)
    a = (x - y).abs()
    b = (y - d).abs()
    loss = torch.log(torch.exp(a) + torch.exp(b) + eps) - b
    return _unwrap(loss, scalar)


def plain_sync_loss(x):
    """Binary cross-entropy of the in-sync probability (1 + x) / 2 against label 1."""
    (x,), scalar = _wrap(x)
    x = _check_similarity("x", x)
    p = ((1.0 + x) / 2.0).clamp(min=1e-7)
    return _unwrap(-torch.log(p), scalar)


# --------------------------------------------------------------------------
# triplet


def _check_distance(name: str, v: torch.Tensor) -> torch.Tensor:
    if (v.detach() < 0).any():
        raise ValueError(f"distance {name} is negative")
    return v


def adaptive_triplet_loss(d_gen_gt, d_gen_ref, d_gt_ref, alpha: float = 1.0, eps: float = 1e-8, denom_floor: float = 1e-6):
    """max(D(gen, gt) - D(gen, ref) / max(D(gt, ref), floor) + alpha, eps)."""
    (p, n, r), scalar = _wrap(d_gen_gt, d_gen_ref, d_gt_ref)
    p = _check_distance("D(gen, gt)", p)
    n = _check_distance("D(gen, ref)", n)
    r = _check_distance("D(gt, ref)", r)
    loss = (p - n / r.clamp(min=denom_floor) + alpha).clamp(min=eps)
    return _unwrap(loss, scalar)


def plain_triplet_loss(d_gen_gt, d_gen_ref, alpha: float = 1.0, eps: float = 1e-8):
    (p, n), scalar = _wrap(d_gen_gt, d_gen_ref)
    p = _check_distance("D(gen, gt)", p)
    n = _check_distance("D(gen, ref)", n)
    return _unwrap((p - n + alpha).clamp(min=eps), scalar)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity along the last axis, clamped at 0 against rounding."""
    return (1.0 - F.cosine_similarity(a, b, dim=-1, eps=1e-8)).clamp(min=0.0)


# --------------------------------------------------------------------------
# reconstruction + adversarial


def pixel_loss(generated: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if generated.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(gt.shape)}")
    return (generated - gt).abs().mean()


def adversarial_losses(d_real, d_fake):
    """(generator term, discriminator term) from discriminator probabilities.

    The generator term is the non-saturating -log D(fake).
    """
    (r, f), scalar = _wrap(d_real, d_fake)
    r = r.clamp(1e-7, 1 - 1e-7)
    f = f.clamp(1e-7, 1 - 1e-7)
    gen = -torch.log(f)
    disc = -(torch.log(r) + torch.log(1.0 - f)) / 2.0
    if not scalar:
        gen, disc = gen.mean(), disc.mean()
    return _unwrap(gen, scalar), _unwrap(disc, scalar)


# --------------------------------------------------------------------------
# perceptual


_VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512)
# relu1_1, relu2_1, relu3_1, relu4_1, relu5_1 -> index of the conv in _VGG19_LAYOUT
_VGG19_TAPS = {"relu1_1": 0, "relu2_1": 2, "relu3_1": 4, "relu4_1": 8, "relu5_1": 12}


@dataclass(frozen=True)
class PerceptualConfig:
    extractor: str = "vgg19_random_slim"  # or "vgg19_imagenet" when weights are cached locally
    layers: tuple = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
    coefficients: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    width_divisor: int = 16
    seed: int = 1234

    def __post_init__(self):
        if len(self.layers) != 5 or len(self.coefficients) != 5:
            raise ValueError("perceptual loss needs exactly 5 layers and 5 coefficients")
        if any(c < 0 for c in self.coefficients):
            raise ValueError("perceptual coefficients must be non-negative")


class ExtractorUnavailable(RuntimeError):
    pass


class PerceptualExtractor(nn.Module):
    """VGG-19 topology up to relu5_1, frozen.

    ``vgg19_random_slim`` keeps the layer layout with channel widths divided
    by ``width_divisor`` and seeded random (He-normal) weights, so no download
    is needed.
    """

    def __init__(self, cfg: PerceptualConfig = PerceptualConfig()):
        super().__init__()
        self.cfg = cfg
        div = 1 if cfg.extractor == "vgg19_imagenet" else cfg.width_divisor
        gen = torch.Generator().manual_seed(cfg.seed)
        layers = []
        in_ch = 3
        self._tap_modules = {}
        conv_idx = 0
        for item in _VGG19_LAYOUT:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            out_ch = max(item // div, 1)
            conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (in_ch * 9)))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            for name, idx in _VGG19_TAPS.items():
                if idx == conv_idx:
                    self._tap_modules[name] = len(layers) - 1
            conv_idx += 1
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        if cfg.extractor == "vgg19_imagenet":
            self._load_imagenet()
        elif cfg.extractor != "vgg19_random_slim":
            raise ExtractorUnavailable(f"unknown perceptual extractor {cfg.extractor!r}")
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self._tap_index = [self._tap_modules[name] for name in cfg.layers]
        self.requires_grad_(False)
        self.eval()

    def _load_imagenet(self):
        try:
            from torchvision.models import VGG19_Weights, vgg19

            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1, progress=False)
        except Exception as exc:  # no cached weights and no network
            raise ExtractorUnavailable(f"ImageNet VGG-19 weights unavailable: {exc}") from exc
        src = [m for m in net.features if isinstance(m, nn.Conv2d)]
        dst = [m for m in self.body if isinstance(m, nn.Conv2d)]
        for s, d in zip(src, dst):
            d.load_state_dict(s.state_dict())

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, images: torch.Tensor) -> list:
        """Features at the 5 selected taps for (B, 3, H, W) images in [0, 1]."""
        x = (images - self.mean) / self.std
        taps = {}
        last = max(self._tap_index)
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self._tap_index:
                taps[i] = x
            if i == last:
                break
        return [taps[i] for i in self._tap_index]


def frames_of(stack: torch.Tensor) -> torch.Tensor:
    """(B, 3k, H, W) channel-stacked frames -> (B * k, 3, H, W)."""
    b, c, h, w = stack.shape
    return stack.reshape(b * (c // 3), 3, h, w)


def perceptual_distance(feats_a: list, feats_b: list, coefficients) -> torch.Tensor:
    total = feats_a[0].new_zeros(())
    for c, fa, fb in zip(coefficients, feats_a, feats_b):
        if c:
            total = total + c * (fa - fb).abs().mean()
    return total


def perceptual_loss(generated: torch.Tensor, gt: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """Sum of c_i * mean|phi_i(generated) - phi_i(gt)| over the 5 taps."""
    if generated.shape != gt.shape:
        raise ValueError("shape mismatch")
    if generated.shape[1] != 3:
        generated, gt = frames_of(generated), frames_of(gt)
    with torch.no_grad():
        target = extractor(gt)
    return perceptual_distance(extractor(generated), target, extractor.cfg.coefficients)


def pooled_features(feats: list, frames_per_item: int = 1) -> torch.Tensor:
    """Globally pooled last-tap activations, averaged over the frames of each item."""
    pooled = feats[-1].mean(dim=(2, 3))
    if frames_per_item > 1:
        pooled = pooled.reshape(-1, frames_per_item, pooled.shape[-1]).mean(dim=1)
    return pooled


# --------------------------------------------------------------------------
# total


@dataclass
class LossBundle:
    """Named loss components and the weighted total.

    In the ablation baselines ``stab_sync`` carries the plain sync loss and
    ``adaptive_triplet`` the plain triplet loss; the weights are unchanged.
    """

    adv: object
    pixel: object
    perceptual: object
    stab_sync: object
    adaptive_triplet: object
    total: object

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


COMPONENTS = ("adv", "pixel", "perceptual", "stab_sync", "adaptive_triplet")


def total_loss(components: Mapping, weights: LossWeights) -> LossBundle:
    """adv + l1*pixel + l2*perceptual + l3*stab_sync + l4*adaptive_triplet.

    Components with zero weight contribute exactly zero.  Raises
    :class:`NonFiniteLossError` naming the first non-finite component.
    """
    vals = {}
    for name in COMPONENTS:
        v = components.get(name, 0.0)
        finite = bool(torch.isfinite(v).all()) if isinstance(v, torch.Tensor) else math.isfinite(float(v))
        if not finite:
            raise NonFiniteLossError(name)
        vals[name] = v
    lam = {"adv": 1.0, "pixel": weights.pixel, "perceptual": weights.perceptual,
           "stab_sync": weights.sync, "adaptive_triplet": weights.triplet}
    total = 0.0
    for name in COMPONENTS:
        if lam[name] != 0.0:
            total = total + lam[name] * vals[name]
    return LossBundle(total=total, **vals)
