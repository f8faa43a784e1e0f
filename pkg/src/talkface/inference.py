"""Whole-clip generation: non-overlapping 5-frame windows, lower-half paste-back,
audio passthrough, and an optional external restoration hook."""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from scipy.signal import resample_poly

from talkface.corpus import (
    MASK_ROW,
    SAMPLE_RATE,
    SAMPLES_PER_FRAME,
    WINDOW_FRAMES,
    WINDOW_SAMPLES,
    VideoClip,
    audio_segment,
    mask_lower_half,
    read_frames,
    window_mel,
    write_frames,
    write_wav,
)
from talkface.nets import Generator, stack_to_tensor, tensor_to_stack
from talkface.train import make_silent_reference


class InferenceError(RuntimeError):
    pass


class HookError(InferenceError):
    pass


@dataclass
class HookConfig:
    kind: str = "none"  # "none" | "external"
    command: Optional[str] = None  # invoked as: <command> <in_dir> <out_dir>
    timeout: float = 600.0

    def __post_init__(self):
        if self.kind not in ("none", "external"):
            raise ValueError(f"unknown restoration hook {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external restoration hook needs a command")


@dataclass
class InferenceJob:
    clip: VideoClip
    generator: Union[Generator, str, Path]
    silent_generator: Union[Generator, str, Path, None] = None
    waveform: Optional[np.ndarray] = None  # defaults to the clip's own audio
    sample_rate: int = SAMPLE_RATE
    hook: HookConfig = field(default_factory=HookConfig)
    out_root: Union[str, Path] = "out"
    job_id: str = "job"


@dataclass
class InferenceResult:
    out_dir: Path
    frames: np.ndarray
    waveform: np.ndarray
    log: dict


def _quantize(frames: np.ndarray) -> np.ndarray:
    return (np.clip(np.round(frames * 255.0), 0, 255) / 255.0).astype(np.float32)


def _as_generator(obj, role: str) -> Optional[Generator]:
    if obj is None or isinstance(obj, Generator):
        return obj
    return Generator.load(obj, role=role)


def prepare_waveform(waveform: np.ndarray, sample_rate: int, num_frames: int) -> np.ndarray:
    """Resample to 16 kHz and check the duration against the frame count."""
    w = np.asarray(waveform, dtype=np.float64)
    if w.ndim != 1:
        raise InferenceError("driving audio must be mono")
    if sample_rate != SAMPLE_RATE:
        g = gcd(int(sample_rate), SAMPLE_RATE)
        w = resample_poly(w, SAMPLE_RATE // g, int(sample_rate) // g)
    expected = num_frames * SAMPLES_PER_FRAME
    if abs(w.shape[0] - expected) > WINDOW_SAMPLES:
        raise InferenceError(
            f"audio-video duration mismatch: {num_frames} frames need {expected} samples, "
            f"audio has {w.shape[0]} (tolerance one window, {WINDOW_SAMPLES})"
        )
    return w.astype(np.float32)


def reference_for(gen: Generator, gs: Optional[Generator], frame: np.ndarray) -> np.ndarray:
    uses_silent = bool(getattr(gen, "extra", {}).get("use_silent_reference", gs is not None))
    if not uses_silent:
        return np.asarray(frame, dtype=np.float32)
    if gs is None:
        raise InferenceError("generator was trained with silent references but no silent-lip generator was given")
    return make_silent_reference(gs, frame)


@torch.no_grad()
def render_clip(gen: Generator, gs: Optional[Generator], clip: VideoClip, waveform: np.ndarray) -> np.ndarray:
    """Generated frames for ``clip`` driven by ``waveform`` (16 kHz), quantized to 8 bits."""
    n = clip.num_frames
    if n < WINDOW_FRAMES + 1:
        raise InferenceError(f"clip needs at least {WINDOW_FRAMES + 1} frames, got {n}")
    source = clip.frames.astype(np.float32)
    ref = reference_for(gen, gs, source[0])
    starts = list(range(0, n - n % WINDOW_FRAMES, WINDOW_FRAMES))
    masked = np.stack([mask_lower_half(source[s : s + WINDOW_FRAMES]) for s in starts])
    mels = np.stack([window_mel(audio_segment(waveform, s)) for s in starts])
    was_training = gen.training
    gen.eval()
    out = gen(
        stack_to_tensor(masked),
        stack_to_tensor(np.repeat(ref[None], len(starts), axis=0)),
        torch.as_tensor(mels, dtype=torch.float32)[:, None],
    )
    gen.train(was_training)
    generated = _quantize(tensor_to_stack(out))
    frames = source.copy()
    for k, s in enumerate(starts):
        frames[s : s + WINDOW_FRAMES, MASK_ROW:] = generated[k, :, MASK_ROW:]
    return frames


def restoration_hook(frames: np.ndarray, hook: HookConfig) -> np.ndarray:
    """``none`` returns the frames untouched; ``external`` pipes them through a command."""
    if hook.kind == "none":
        return frames
    with tempfile.TemporaryDirectory() as tmp:
        in_dir, out_dir = Path(tmp) / "in", Path(tmp) / "out"
        write_frames(frames, in_dir)
        out_dir.mkdir()
        cmd = shlex.split(hook.command) + [str(in_dir), str(out_dir)]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=hook.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise HookError(f"restoration hook could not run: {exc}") from exc
        if proc.returncode != 0:
            raise HookError(f"restoration hook exited with {proc.returncode}: {proc.stderr.strip()[-2000:]}")
        expected = sorted(p.name for p in in_dir.iterdir())
        produced = sorted(p.name for p in out_dir.iterdir())
        if produced != expected:
            raise HookError(f"restoration hook produced {len(produced)} files, expected the {len(expected)} input names")
        try:
            restored = read_frames(out_dir)
        except Exception as exc:
            raise HookError(f"restoration hook output failed validation: {exc}") from exc
    if restored.shape != frames.shape:
        raise HookError(f"restoration hook changed frame shape {frames.shape} -> {restored.shape}")
    return restored


def generate_video(job: InferenceJob) -> InferenceResult:
    gen = _as_generator(job.generator, "G_L")
    gs = _as_generator(job.silent_generator, "G_S")
    clip = job.clip
    waveform = clip.waveform if job.waveform is None else job.waveform
    waveform = prepare_waveform(waveform, job.sample_rate, clip.num_frames)
    frames = render_clip(gen, gs, clip, waveform)
    frames = restoration_hook(frames, job.hook)

    out_dir = Path(job.out_root) / job.job_id
    out_dir.mkdir(parents=True, exist_ok=True)
    for old in out_dir.glob("frame_*.png"):
        old.unlink()
    write_frames(frames, out_dir)
    write_wav(out_dir / "audio.wav", waveform)
    n = clip.num_frames
    n_full = n - n % WINDOW_FRAMES
    log = {
        "job_id": job.job_id,
        "clip_id": clip.clip_id,
        "num_frames": n,
        "windows": [{"start": s, "end": s + WINDOW_FRAMES} for s in range(0, n_full, WINDOW_FRAMES)],
        "copied_frames": list(range(n_full, n)),
        "reference_frame": 0,
        "silent_reference": bool(getattr(gen, "extra", {}).get("use_silent_reference", gs is not None)),
        "generator_checksum": gen.checksum(),
        "generator_config_hash": getattr(gen, "config_hash", None),
        "silent_generator_checksum": gs.checksum() if gs is not None else None,
        "hook": {"kind": job.hook.kind, "command": job.hook.command},
        "audio_samples": int(waveform.shape[0]),
    }
    (out_dir / "log.json").write_text(json.dumps(log, indent=2))
    return InferenceResult(out_dir=out_dir, frames=frames, waveform=waveform, log=log)
