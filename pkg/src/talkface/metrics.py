"""Evaluation metrics: SSIM, PSNR, FID, IFC, LMD, LSE-C/LSE-D.

FID and LSE are computed with the locally trained sync scorer rather than an
Inception network or the released SyncNet, so their values are only
comparable between runs of this package.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from talkface import render
from talkface._kernels import separable_filter
from talkface.corpus import MASK_ROW, WINDOW_FRAMES, VideoClip, audio_segment, window_mel

logger = logging.getLogger(__name__)

DESK_SCALE_BANNER = (
    "NOTE: FID and LSE-C/LSE-D here use the locally trained sync scorer as the embedder; "
    "they are not comparable to published Inception-FID or SyncNet LSE numbers."
)

PSNR_CAP = 100.0
LSE_MAX_OFFSET = 15


class MetricError(ValueError):
    pass


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# --------------------------------------------------------------------------
# SSIM / PSNR


def gaussian_taps(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, taps: np.ndarray, c1: float, c2: float) -> float:
    mu_x = separable_filter(x, taps)
    mu_y = separable_filter(y, taps)
    sxx = separable_filter(x * x, taps) - mu_x * mu_x
    syy = separable_filter(y * y, taps) - mu_y * mu_y
    sxy = separable_filter(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM for images in [0, 1], averaged over channels.

    Accepts (H, W), (H, W, C) or stacks (..., H, W, C); stacks are averaged
    frame by frame.  Local statistics use half-sample symmetric boundary
    handling, so images smaller than the window are still defined.
    """
    a, b = _check_same_shape(a, b)
    taps = gaussian_taps(win_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    if a.ndim == 2:
        return _ssim_channel(a, b, taps, c1, c2)
    if a.ndim == 3:
        return float(np.mean([_ssim_channel(a[..., k], b[..., k], taps, c1, c2) for k in range(a.shape[-1])]))
    flat_a = a.reshape((-1,) + a.shape[-3:])
    flat_b = b.reshape((-1,) + b.shape[-3:])
    return float(np.mean([ssim(x, y, win_size, sigma, k1, k2) for x, y in zip(flat_a, flat_b)]))


def psnr(a, b) -> float:
    a, b = _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# --------------------------------------------------------------------------
# FID


def _psd_sqrt(mat: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.where(w < floor, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eig_floor: float = 1e-10) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^1/2) via the symmetric form
    Tr((A^1/2 B A^1/2)^1/2).

    Eigenvalues of A below ``eig_floor`` count as zero.  The inner product
    matrix has eigenvalues on the squared scale, so only its rounding
    negatives are dropped there; flooring it at ``eig_floor`` too would
    discard real mass when covariances are small.
    """
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    root_a = _psd_sqrt(np.asarray(cov_a, dtype=np.float64), eig_floor)
    inner = root_a @ np.asarray(cov_b, dtype=np.float64) @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_covmean = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean)
    return max(value, 0.0)


def fid_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.shape[0] == 0 or emb_b.shape[0] == 0:
        raise MetricError("FID needs non-empty sets")
    dim = emb_a.shape[1]
    if min(emb_a.shape[0], emb_b.shape[0]) < 2 * dim:
        warnings.warn(f"FID with fewer than {2 * dim} samples per set is a biased estimate", stacklevel=2)

    def moments(e):
        mu = e.mean(axis=0)
        cov = np.cov(e, rowvar=False) if e.shape[0] > 1 else np.zeros((dim, dim))
        return mu, np.atleast_2d(cov)

    return frechet_distance(*moments(emb_a), *moments(emb_b))


def fid(set_a, set_b, embedder) -> float:
    """FID between two image sets; ``embedder`` maps (N, 96, 96, 3) -> (N, D)."""
    set_a = np.asarray(set_a)
    set_b = np.asarray(set_b)
    if set_a.shape[0] == 0 or set_b.shape[0] == 0:
        raise MetricError("FID needs non-empty sets")
    return fid_from_embeddings(embedder(set_a), embedder(set_b))


# --------------------------------------------------------------------------
# IFC


def ifc(gen, gt) -> float:
    """Mean |L1(gen_t, gen_t+1) - L1(gt_t, gt_t+1)| with per-pixel mean L1."""
    gen, gt = _check_same_shape(gen, gt)
    if gen.shape[0] < 2:
        raise MetricError("IFC needs at least two frames")
    axes = tuple(range(1, gen.ndim))
    d_gen = np.mean(np.abs(gen[1:] - gen[:-1]), axis=axes)
    d_gt = np.mean(np.abs(gt[1:] - gt[:-1]), axis=axes)
    return float(np.mean(np.abs(d_gen - d_gt)))


# --------------------------------------------------------------------------
# mouth oracle + LMD

_LUM_LIP = float(render.luminance(np.array(render.LIP_COLOR)))
_LUM_INTERIOR = float(render.luminance(np.array(render.INTERIOR_COLOR)))
_REDNESS_LO, _REDNESS_HI = 0.35, 0.50
_MIN_LIP_MASS = 10.0


@dataclass
class MouthParams:
    aperture: float
    center: tuple  # (row, col), pixels
    found: bool = True


def extract_mouth_params(frame) -> MouthParams:
    """Recover mouth aperture and centre from a frame drawn by the synthetic renderer.

    Interior membership is read linearly off luminance between the lip and
    interior colours; aperture comes from the interior area divided by the
    known mouth width, which keeps it insensitive to head rotation.
    """
    frame = np.asarray(frame, dtype=np.float64)
    region = frame[MASK_ROW:]
    lum = render.luminance(region)
    redness = region[..., 0] - np.maximum(region[..., 1], region[..., 2])
    m_int = np.clip((_LUM_LIP - lum) / (_LUM_LIP - _LUM_INTERIOR), 0.0, 1.0)
    m_lip = np.clip((redness - _REDNESS_LO) / (_REDNESS_HI - _REDNESS_LO), 0.0, 1.0)
    if m_lip.sum() < _MIN_LIP_MASS:
        warnings.warn("mouth not found", stacklevel=2)
        return MouthParams(aperture=0.0, center=(float("nan"), float("nan")), found=False)
    half_h = m_int.sum() / (np.pi * render.MOUTH_HALF_WIDTH)
    aperture = float(np.clip(half_h / render.MOUTH_MAX_HALF_HEIGHT, 0.0, 1.0))
    w = np.maximum(m_int, m_lip)
    rows, cols = np.mgrid[0 : region.shape[0], 0 : region.shape[1]]
    total = w.sum()
    center = (float((w * (rows + 0.5)).sum() / total) + MASK_ROW, float((w * (cols + 0.5)).sum() / total))
    return MouthParams(aperture=aperture, center=center)


def mouth_keypoints(aperture: float, center) -> np.ndarray:
    """Centre plus upper/lower lip extremes, shape (3, 2)."""
    half = aperture * render.MAX_APERTURE_PX / 2.0
    r, c = center
    return np.array([[r, c], [r - half, c], [r + half, c]], dtype=np.float64)


def lmd(gen_frames, gt_clip: VideoClip) -> Optional[float]:
    """Mean mouth-landmark distance in pixels; None when the GT clip has no oracle."""
    if not gt_clip.has_mouth_oracle:
        return None
    gen_frames = np.asarray(gen_frames)
    n = min(gen_frames.shape[0], gt_clip.num_frames)
    dists = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in range(n):
            mp = extract_mouth_params(gen_frames[t])
            ref = mouth_keypoints(gt_clip.mouth_aperture[t], gt_clip.mouth_center[t])
            if not mp.found:
                # fixed penalty: one full mouth opening
                dists.append(render.MAX_APERTURE_PX)
                continue
            est = mouth_keypoints(mp.aperture, mp.center)
            dists.append(np.linalg.norm(est - ref, axis=1).mean())
    return float(np.mean(dists))


# --------------------------------------------------------------------------
# LSE


def lse(gen_frames, waveform, scorer, max_offset: int = LSE_MAX_OFFSET) -> tuple:
    """(LSE-C, LSE-D) with distance = 1 - cosine over offsets in [-max_offset, max_offset].

    For each 5-frame window the audio window is shifted by every offset
    (audio outside the clip is digital silence).  LSE-D averages the per-window
    minimum distance, LSE-C the per-window (median - minimum).
    """
    gen_frames = np.asarray(gen_frames, dtype=np.float32)
    n = gen_frames.shape[0]
    if n < 2 * max_offset + 1:
        raise MetricError(f"LSE needs at least {2 * max_offset + 1} frames, got {n}")
    starts = np.arange(0, n - WINDOW_FRAMES + 1)
    visual = scorer.embed_visual_batch(
        np.stack([gen_frames[s : s + WINDOW_FRAMES, MASK_ROW:] for s in starts])
    )
    audio_starts = np.arange(-max_offset, n - WINDOW_FRAMES + 1 + max_offset)
    mels = np.stack([window_mel(audio_segment(waveform, s)) for s in audio_starts])
    audio = scorer.embed_audio_batch(mels)
    offsets = np.arange(-max_offset, max_offset + 1)
    mins, confs = [], []
    for i, s in enumerate(starts):
        idx = s + offsets + max_offset
        dist = 1.0 - audio[idx] @ visual[i]
        mins.append(dist.min())
        confs.append(np.median(dist) - dist.min())
    return float(np.mean(confs)), float(np.mean(mins))


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    ssim: Optional[float] = None
    psnr: Optional[float] = None
    fid: Optional[float] = None
    ifc: Optional[float] = None
    lmd: Optional[float] = None
    lse_c: Optional[float] = None
    lse_d: Optional[float] = None
    per_clip: dict = field(default_factory=dict)
    available: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        names = ("ssim", "psnr", "fid", "ifc", "lmd", "lse_c", "lse_d")
        lines = [DESK_SCALE_BANNER, f"{'metric':<8} value"]
        for n in names:
            v = getattr(self, n)
            lines.append(f"{n:<8} {'unavailable' if v is None else f'{v:.4f}'}")
        return "\n".join(lines)


def evaluate_clips(pairs, scorer=None) -> MetricReport:
    """Aggregate metrics over (clip_id, generated_frames, gt_clip) triples.

    SSIM/PSNR/IFC/LMD/LSE are clip means; FID pools every frame.  A metric
    that cannot be computed for any clip is flagged unavailable (None), never
    reported as zero.
    """
    per_clip = {}
    gen_all, gt_all = [], []
    for clip_id, gen, gt_clip in pairs:
        gen = np.asarray(gen, dtype=np.float32)
        gt = gt_clip.frames[: gen.shape[0]]
        row = {"ssim": ssim(gen, gt), "psnr": psnr(gen, gt), "ifc": ifc(gen, gt), "lmd": lmd(gen, gt_clip)}
        if scorer is not None and gen.shape[0] >= 2 * LSE_MAX_OFFSET + 1:
            row["lse_c"], row["lse_d"] = lse(gen, gt_clip.waveform, scorer)
        else:
            row["lse_c"] = row["lse_d"] = None
        per_clip[clip_id] = row
        gen_all.append(gen)
        gt_all.append(gt)

    def mean_of(key):
        vals = [r[key] for r in per_clip.values() if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    report = MetricReport(per_clip=per_clip)
    for key in ("ssim", "psnr", "ifc", "lmd", "lse_c", "lse_d"):
        setattr(report, key, mean_of(key))
    if scorer is not None and gen_all:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report.fid = fid(np.concatenate(gen_all), np.concatenate(gt_all), scorer.frame_embedder)
    report.available = {
        k: getattr(report, k) is not None for k in ("ssim", "psnr", "fid", "ifc", "lmd", "lse_c", "lse_d")
    }
    return report
