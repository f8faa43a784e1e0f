"""Synthetic audio-visual corpus, mel features and training windows."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.io import wavfile

from talkface import render
from talkface.repro import derive_seed

logger = logging.getLogger(__name__)

FPS = 25
SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640
WINDOW_FRAMES = 5
WINDOW_SAMPLES = WINDOW_FRAMES * SAMPLES_PER_FRAME  # 3200
MASK_ROW = render.HALF  # rows 48..95 are masked

SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    window_size: int = 800
    hop_size: int = 200
    n_mels: int = 80
    amplitude_floor: float = 1e-5
    fmin: float = 55.0
    fmax: float = 7600.0
    # symmetric padding per side when turning a 5-frame segment into 16 steps
    segment_pad: int = 300

    def __post_init__(self):
        if not (self.window_size > self.hop_size > 0):
            raise ValueError("need window_size > hop_size > 0")
        if self.n_mels != 80:
            raise ValueError("n_mels must be 80")
        if self.amplitude_floor <= 0:
            raise ValueError("amplitude_floor must be positive")


DEFAULT_MEL = MelConfig()


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray  # (N, 96, 96, 3) float32 in [0, 1]
    waveform: np.ndarray  # float32, 16 kHz mono
    fps: int = FPS
    mouth_aperture: Optional[np.ndarray] = None  # (N,)
    mouth_center: Optional[np.ndarray] = None  # (N, 2) row, col
    pose: Optional[np.ndarray] = None  # (N, 3) dy, dx, rotation degrees
    identity: Optional[dict] = None
    seed: Optional[int] = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def has_mouth_oracle(self) -> bool:
        return self.mouth_aperture is not None and self.mouth_center is not None

    def meta(self) -> dict:
        def lst(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "clip_id": self.clip_id,
            "fps": self.fps,
            "num_frames": self.num_frames,
            "generator_seed": self.seed,
            "mouth_params": None
            if not self.has_mouth_oracle
            else {"aperture": lst(self.mouth_aperture), "center": lst(self.mouth_center)},
            "pose_params": lst(self.pose),
            "identity_params": self.identity,
        }


@dataclass
class TrainingWindow:
    gt_stack: np.ndarray  # (5, 96, 96, 3)
    masked_stack: np.ndarray  # (5, 96, 96, 3), rows 48.. zeroed
    reference: np.ndarray  # (96, 96, 3)
    mel: np.ndarray  # (16, 80)
    clip_id: str
    start_frame: int
    reference_index: int


# --------------------------------------------------------------------------
# audio


@lru_cache(maxsize=4)
def _mel_basis(cfg: MelConfig) -> np.ndarray:
    import librosa

    return librosa.filters.mel(
        sr=cfg.sample_rate, n_fft=cfg.window_size, n_mels=cfg.n_mels, fmin=cfg.fmin, fmax=cfg.fmax
    ).astype(np.float64)


@lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    from scipy.signal import get_window

    return get_window("hann", n, fftbins=True)


def mel_spectrogram(waveform: np.ndarray, cfg: MelConfig = DEFAULT_MEL, pad: int = 0) -> np.ndarray:
    """Log-magnitude mel spectrogram, shape (T, n_mels).

    ``T = (len(waveform) + 2 * pad - window_size) // hop_size + 1``.  ``pad``
    samples of symmetric (edge-inclusive) reflection padding are added on each side first.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise CorpusError("waveform must be 1-D")
    if pad:
        x = np.pad(x, pad, mode="symmetric")
    if x.shape[0] < cfg.window_size:
        raise CorpusError(f"segment of {x.shape[0]} samples is shorter than one window ({cfg.window_size})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_size)[:: cfg.hop_size]
    spec = np.abs(np.fft.rfft(frames * _hann(cfg.window_size), axis=1))
    mel = spec @ _mel_basis(cfg).T
    return np.log(np.maximum(mel, cfg.amplitude_floor)).astype(np.float32)


def window_mel(segment: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """16x80 mel for one 5-frame (3200-sample) audio segment."""
    segment = np.asarray(segment)
    if segment.shape != (WINDOW_SAMPLES,):
        raise CorpusError(f"expected a {WINDOW_SAMPLES}-sample segment, got {segment.shape}")
    return mel_spectrogram(segment, cfg, pad=cfg.segment_pad)


def silent_mel(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    return window_mel(np.zeros(WINDOW_SAMPLES, dtype=np.float32), cfg)


def audio_segment(waveform: np.ndarray, start_frame: int) -> np.ndarray:
    """The 3200 samples under frames [start_frame, start_frame + 5); zero outside the signal."""
    lo = start_frame * SAMPLES_PER_FRAME
    hi = lo + WINDOW_SAMPLES
    out = np.zeros(WINDOW_SAMPLES, dtype=np.float32)
    a, b = max(lo, 0), min(hi, waveform.shape[0])
    if b > a:
        out[a - lo : b - lo] = waveform[a:b]
    return out


def clip_mels(clip: VideoClip, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Mel windows for every valid start frame, shape (N - 4, 16, 80)."""
    n = clip.num_frames - WINDOW_FRAMES + 1
    return np.stack([window_mel(audio_segment(clip.waveform, s), cfg) for s in range(n)])


def frame_rms(waveform: np.ndarray, num_frames: int) -> np.ndarray:
    x = np.zeros(num_frames * SAMPLES_PER_FRAME, dtype=np.float64)
    m = min(x.shape[0], waveform.shape[0])
    x[:m] = waveform[:m]
    return np.sqrt(np.mean(x.reshape(num_frames, SAMPLES_PER_FRAME) ** 2, axis=1))


def _moving_average3(v: np.ndarray) -> np.ndarray:
    p = np.pad(v, 1, mode="edge")
    return (p[:-2] + p[1:-1] + p[2:]) / 3.0


_MIN_VOICED_RUN = 4


def _silent_mask(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    """1-2 contiguous silent blocks; voiced runs between them are empty or >= 4 frames."""
    n_silent = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if n_silent == 0:
        return mask
    if n_silent >= n:
        mask[:] = True
        return mask
    blocks = 1 if n_silent < 8 else 2
    sizes = [n_silent // blocks + (1 if i < n_silent % blocks else 0) for i in range(blocks)]
    voiced = n - n_silent
    # split the voiced frames into blocks + 1 gaps; a 1-3 frame voiced run is
    # too short for a syllable and would be flattened by the aperture smoothing
    for _ in range(200):
        cuts = np.sort(rng.integers(0, voiced + 1, size=blocks))
        gaps = np.diff(np.concatenate([[0], cuts, [voiced]]))
        if np.all((gaps == 0) | (gaps >= _MIN_VOICED_RUN)):
            break
    else:
        cuts = np.zeros(blocks, dtype=int)
        if blocks == 2 and voiced >= 2 * _MIN_VOICED_RUN:
            cuts[1] = voiced // 2
    pos = 0
    prev = 0
    for size, cut in zip(sizes, cuts):
        pos += cut - prev
        prev = cut
        mask[pos : pos + size] = True
        pos += size
    return mask


def _voiced_envelope(rng: np.random.Generator, silent: np.ndarray) -> np.ndarray:
    """Sample-level amplitude envelope made of raised-cosine syllables."""
    n = silent.shape[0]
    env = np.zeros(n * SAMPLES_PER_FRAME, dtype=np.float64)
    t = 0
    while t < n:
        if silent[t]:
            t += 1
            continue
        run_end = t
        while run_end < n and not silent[run_end]:
            run_end += 1
        s = t
        while s < run_end:
            length = int(rng.integers(4, 10))
            gap = int(rng.integers(0, 2))
            if run_end - (s + length + gap) < _MIN_VOICED_RUN:
                length = run_end - s  # absorb a remainder too short for its own syllable
            peak = float(rng.uniform(0.35, 1.0))
            lo, hi = s * SAMPLES_PER_FRAME, (s + length) * SAMPLES_PER_FRAME
            m = hi - lo
            env[lo:hi] = peak * np.sin(np.pi * (np.arange(m) + 0.5) / m) ** 2
            s += length + gap
        t = run_end
    return env


def _carrier(rng: np.random.Generator, num_samples: int) -> np.ndarray:
    f0 = rng.uniform(100.0, 220.0)
    t = np.arange(num_samples) / SAMPLE_RATE
    vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vib) / SAMPLE_RATE
    formant = rng.uniform(500.0, 1200.0)
    out = np.zeros(num_samples)
    k = 1
    while k * f0 < 4000.0:
        amp = 1.0 / k + 0.8 * np.exp(-(((k * f0) - formant) / 300.0) ** 2)
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        k += 1
    out += 0.05 * rng.standard_normal(num_samples)
    return out / np.max(np.abs(out)) * 0.9


def _quantize_audio(x: np.ndarray) -> np.ndarray:
    q = np.clip(np.round(x * 32767.0), -32767, 32767).astype(np.int16)
    return (q.astype(np.float32) / np.float32(32767.0)).astype(np.float32)


def _quantize_frames(frames: np.ndarray) -> np.ndarray:
    q = np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def synth_clip(seed: int, num_frames: int, silence_fraction: float, clip_id: Optional[str] = None) -> VideoClip:
    """Render one deterministic synthetic talking-face clip.

    Mouth aperture per frame is the frame's audio RMS (over its 40 ms span),
    normalised by the carrier RMS, clipped to [0, 1] and smoothed with a
    3-frame moving average.  Frames and audio are quantised to 8-bit / 16-bit
    levels so the on-disk corpus round-trips exactly.
    """
    if num_frames < 10:
        raise CorpusError("num_frames must be >= 10 (a 5-frame window plus a disjoint reference)")
    if not 0.0 <= silence_fraction <= 1.0:
        raise CorpusError("silence_fraction must be in [0, 1]")
    rng = np.random.default_rng([seed, 0xA0])
    silent = _silent_mask(rng, num_frames, silence_fraction)
    env = _voiced_envelope(rng, silent)
    carrier = _carrier(rng, env.shape[0])
    waveform = _quantize_audio(env * carrier)

    ref_rms = float(np.sqrt(np.mean(carrier**2)))
    raw = np.clip(frame_rms(waveform, num_frames) / ref_rms, 0.0, 1.0)
    aperture = _moving_average3(raw)

    pose = np.zeros((num_frames, 3))
    limits = np.array([render.MAX_SHIFT_PX, render.MAX_SHIFT_PX, render.MAX_ROT_DEG])
    state = rng.uniform(-0.5, 0.5, size=3) * limits
    steps = np.array([0.35, 0.35, 0.45])
    for t in range(num_frames):
        pose[t] = state
        state = np.clip(state + rng.standard_normal(3) * steps, -limits, limits)

    identity = render.make_identity(seed)
    frames = np.stack([render.render_face(identity, aperture[t], *pose[t]) for t in range(num_frames)])
    centers = np.array([render.mouth_center(*pose[t]) for t in range(num_frames)])
    return VideoClip(
        clip_id=clip_id or f"synth_{seed:08d}",
        frames=_quantize_frames(frames),
        waveform=waveform,
        mouth_aperture=aperture,
        mouth_center=centers,
        pose=pose,
        identity=identity.to_dict(),
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# windows


def mask_lower_half(stack: np.ndarray) -> np.ndarray:
    out = np.array(stack, copy=True)
    out[..., MASK_ROW:, :, :] = 0.0
    return out


def make_window(clip: VideoClip, start_frame: int, rng_seed: int, cfg: MelConfig = DEFAULT_MEL) -> TrainingWindow:
    n = clip.num_frames
    if n < WINDOW_FRAMES + 1:
        raise CorpusError("clip needs at least 6 frames")
    if not 0 <= start_frame <= n - WINDOW_FRAMES:
        raise CorpusError(f"start_frame {start_frame} out of range for {n} frames")
    candidates = np.concatenate([np.arange(0, start_frame), np.arange(start_frame + WINDOW_FRAMES, n)])
    ref_idx = int(np.random.default_rng(rng_seed).choice(candidates))
    gt = clip.frames[start_frame : start_frame + WINDOW_FRAMES]
    return TrainingWindow(
        gt_stack=gt.copy(),
        masked_stack=mask_lower_half(gt),
        reference=clip.frames[ref_idx].copy(),
        mel=window_mel(audio_segment(clip.waveform, start_frame), cfg),
        clip_id=clip.clip_id,
        start_frame=int(start_frame),
        reference_index=ref_idx,
    )


# --------------------------------------------------------------------------
# corpus container + disk format


@dataclass
class Corpus:
    clips: list
    splits: dict = field(default_factory=dict)  # clip_id -> split tag
    seed: Optional[int] = None

    def __post_init__(self):
        self._by_id = {c.clip_id: c for c in self.clips}

    def __len__(self):
        return len(self.clips)

    def clip(self, clip_id: str) -> VideoClip:
        return self._by_id[clip_id]

    def split(self, name: str) -> list:
        return [c for c in self.clips if self.splits.get(c.clip_id) == name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.clips:
            h.update(c.clip_id.encode())
            h.update(self.splits.get(c.clip_id, "").encode())
            h.update(np.round(c.frames * 255.0).astype(np.uint8).tobytes())
            h.update(np.round(c.waveform.astype(np.float64) * 32767.0).astype(np.int16).tobytes())
        return h.hexdigest()[:16]

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for c in self.clips:
            save_clip(c, root / c.clip_id)
        index = {
            "seed": self.seed,
            "fingerprint": self.fingerprint(),
            "clips": [{"clip_id": c.clip_id, "split": self.splits.get(c.clip_id, "train")} for c in self.clips],
        }
        (root / "index.json").write_text(json.dumps(index, indent=1))
        return root

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        index_path = root / "index.json"
        if not index_path.exists():
            raise CorpusError(f"{root} has no index.json")
        index = json.loads(index_path.read_text())
        clips = [load_clip(root / e["clip_id"]) for e in index["clips"]]
        corpus = cls(clips=clips, splits={e["clip_id"]: e["split"] for e in index["clips"]}, seed=index.get("seed"))
        stored = index.get("fingerprint")
        if stored and stored != corpus.fingerprint():
            raise CorpusError(f"corpus at {root} does not match its recorded fingerprint")
        return corpus


def split_for(i: int, n: int) -> str:
    n_test = max(1, n // 10)
    n_val = max(1, n // 10)
    if i >= n - n_test:
        return "test"
    if i >= n - n_test - n_val:
        return "val"
    return "train"


def build_corpus(n_clips: int, seed: int, num_frames: int = 50, silence_range=(0.1, 0.4)) -> Corpus:
    """Deterministic synthetic corpus: 80/10/10 train/val/test split by index."""
    if n_clips < 3:
        raise CorpusError("need at least 3 clips (one per split)")
    rng = np.random.default_rng([seed, 0xC0])
    fractions = rng.uniform(*silence_range, size=n_clips)
    clips, splits = [], {}
    for i in range(n_clips):
        clip_seed = derive_seed(seed, "clip", i)
        clip = synth_clip(clip_seed, num_frames, float(fractions[i]), clip_id=f"clip{i:04d}")
        clips.append(clip)
        splits[clip.clip_id] = split_for(i, n_clips)
    return Corpus(clips=clips, splits=splits, seed=seed)


def write_wav(path, waveform: np.ndarray) -> None:
    q = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * 32767.0), -32767, 32767).astype(np.int16)
    wavfile.write(str(path), SAMPLE_RATE, q)


def read_wav(path) -> np.ndarray:
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise CorpusError(f"{path}: expected {SAMPLE_RATE} Hz audio, got {rate} Hz")
    if data.ndim != 1:
        raise CorpusError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return (data.astype(np.float32) / np.float32(32767.0)).astype(np.float32)
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise CorpusError(f"{path}: unsupported sample format {data.dtype}")


def write_frames(frames: np.ndarray, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.round(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)
    for t, f in enumerate(q):
        Image.fromarray(f, mode="RGB").save(out_dir / f"frame_{t:05d}.png")


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def read_frames(frames_dir) -> np.ndarray:
    frames_dir = Path(frames_dir)
    files = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise CorpusError(f"no image files in {frames_dir}")
    out = []
    for p in files:
        arr = np.asarray(Image.open(p).convert("RGB"))
        if arr.shape != (render.SIZE, render.SIZE, 3):
            raise CorpusError(f"{p.name}: expected 96x96 crops, got {arr.shape[1]}x{arr.shape[0]}")
        out.append(arr)
    return np.stack(out).astype(np.float32) / np.float32(255.0)


def save_clip(clip: VideoClip, clip_dir) -> None:
    clip_dir = Path(clip_dir)
    write_frames(clip.frames, clip_dir)
    write_wav(clip_dir / "audio.wav", clip.waveform)
    (clip_dir / "meta.json").write_text(json.dumps(clip.meta()))


def load_clip(clip_dir) -> VideoClip:
    clip_dir = Path(clip_dir)
    meta_path = clip_dir / "meta.json"
    if not meta_path.exists():
        return ingest_real_clip(clip_dir, clip_dir / "audio.wav")
    meta = json.loads(meta_path.read_text())
    frames = read_frames(clip_dir)
    waveform = read_wav(clip_dir / "audio.wav")
    mp = meta.get("mouth_params")
    pose = meta.get("pose_params")
    return VideoClip(
        clip_id=meta.get("clip_id", clip_dir.name),
        frames=frames,
        waveform=waveform,
        fps=int(meta.get("fps", FPS)),
        mouth_aperture=None if mp is None else np.asarray(mp["aperture"], dtype=np.float64),
        mouth_center=None if mp is None else np.asarray(mp["center"], dtype=np.float64),
        pose=None if pose is None else np.asarray(pose, dtype=np.float64),
        identity=meta.get("identity_params"),
        seed=meta.get("generator_seed"),
    )


def ingest_real_clip(frames_dir, audio_path) -> VideoClip:
    """Load pre-cropped 96x96 frames plus a 16 kHz mono wav; no mouth/pose oracle."""
    frames = read_frames(frames_dir)
    waveform = read_wav(audio_path)
    expected = frames.shape[0] / FPS * SAMPLE_RATE
    if abs(waveform.shape[0] - expected) > DEFAULT_MEL.hop_size:
        raise CorpusError(
            f"duration mismatch: {frames.shape[0]} frames need ~{int(expected)} samples, audio has {waveform.shape[0]}"
        )
    return VideoClip(clip_id=Path(frames_dir).name, frames=frames, waveform=waveform)
