"""Synthetic audiovisual repetition generator.

Every video is built from one jittered phase timeline shared by the visual
pattern and the audio events, so both modalities carry exactly the requested
repetition count. Vision degradations are applied to the rendered frames
afterwards, which keeps clean/degraded pairs count-identical and maps each
degradation onto one challenge tag.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .datasets import ChallengeTag, DatasetManifest, InMemoryMediaStore, VideoRecord, save_manifest
from .metrics import CountLabel
from .sound import AudioWaveform

BACKGROUND = 25
FOREGROUND = 230


class VisualPattern(str, Enum):
    OSCILLATING_BLOB = "oscillating_blob"
    BOUNCING_DOT = "bouncing_dot"


class AudioPattern(str, Enum):
    CLICK_TRAIN = "click_train"
    TONE_BURST = "tone_burst"


@dataclass(frozen=True)
class SyntheticSpec:
    count: int
    period_s: float = 1.0
    period_jitter: float = 0.0
    visual_pattern: VisualPattern = VisualPattern.OSCILLATING_BLOB
    audio_pattern: AudioPattern = AudioPattern.CLICK_TRAIN
    noise_level: float = 0.0
    audio_noise_level: float | None = None  # defaults to noise_level
    degradation: ChallengeTag | None = None
    resolution: int = 24
    fps: float = 25.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"synthetic count must be >= 2, got {self.count}")
        if not 0.0 <= self.period_jitter < 1.0:
            raise ValueError("period_jitter must lie in [0, 1)")
        object.__setattr__(self, "visual_pattern", VisualPattern(self.visual_pattern))
        object.__setattr__(self, "audio_pattern", AudioPattern(self.audio_pattern))
        if self.degradation is not None:
            object.__setattr__(self, "degradation", ChallengeTag(self.degradation))


def _cycle_boundaries(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Cycle start/end times [t_0=0, ..., t_count=duration]."""
    jitter = rng.uniform(-spec.period_jitter, spec.period_jitter, size=spec.count)
    durations = spec.period_s * (1.0 + jitter)
    return np.concatenate([[0.0], np.cumsum(durations)])


def _phase(times: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Piecewise-linear phase: integer k at the kth cycle boundary."""
    return np.interp(times, boundaries, np.arange(len(boundaries), dtype=np.float64))


def _render_frames(spec: SyntheticSpec, phase: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    res = spec.resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    osc = np.cos(2.0 * np.pi * phase)  # 2 mean crossings per cycle, none at the ends
    frames = np.full((len(phase), res, res), float(BACKGROUND))
    if spec.visual_pattern is VisualPattern.BOUNCING_DOT:
        cx = res / 2.0
        radius = max(2.0, res / 8.0)
        centers = res / 2.0 + 0.3 * res * osc
        for i, cy in enumerate(centers):
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
            frames[i][mask] = FOREGROUND
    else:
        sigma = (res / 8.0) * (1.0 + 0.45 * osc)
        d2 = (xx - res / 2.0) ** 2 + (yy - res / 2.0) ** 2
        for i, s in enumerate(sigma):
            frames[i] += (FOREGROUND - BACKGROUND) * np.exp(-d2 / (2.0 * s * s))
    if spec.noise_level > 0:
        frames += rng.normal(0.0, 8.0 * spec.noise_level, size=frames.shape)
    frames = np.clip(frames, 0, 255).astype(np.uint8)
    return np.repeat(frames[..., None], 3, axis=-1)


def _synth_audio(spec: SyntheticSpec, boundaries: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(boundaries[-1] * sr))
    wave = np.zeros(n)
    if spec.audio_pattern is AudioPattern.CLICK_TRAIN:
        length = int(0.012 * sr)
        burst = np.hanning(length) * rng.uniform(-1.0, 1.0, size=length)
    else:
        length = int(0.060 * sr)
        f0 = rng.uniform(500.0, 1500.0)
        burst = np.hanning(length) * np.sin(2.0 * np.pi * f0 * np.arange(length) / sr)
    for t in boundaries[:-1]:
        i = int(round(t * sr))
        j = min(i + length, n)
        wave[i:j] += burst[: j - i]
    peak = np.abs(wave).max()
    if peak > 0:
        wave *= 0.8 / peak
    noise = spec.noise_level if spec.audio_noise_level is None else spec.audio_noise_level
    if noise > 0:
        wave += rng.normal(0.0, 0.05 * noise, size=n)
    return np.clip(wave, -1.0, 1.0)


def _degrade(frames: np.ndarray, kind: ChallengeTag, rng: np.random.Generator) -> np.ndarray:
    t, h, w, _ = frames.shape
    if kind is ChallengeTag.LOW_ILLUMINATION:
        return (frames * 0.2).astype(np.uint8)
    if kind is ChallengeTag.LOW_RESOLUTION:
        f = next(f for f in (6, 4, 2, 1) if h % f == 0)
        coarse = frames.reshape(t, h // f, f, w // f, f, 3).mean(axis=(2, 4))
        return np.repeat(np.repeat(coarse, f, axis=1), f, axis=2).astype(np.uint8)
    if kind is ChallengeTag.DISAPPEARING_ACTIVITY:
        out = frames.copy()
        out[int(0.05 * t) : int(0.95 * t)] = BACKGROUND
        return out
    if kind is ChallengeTag.FAST_MOTION:
        return frames[::2]  # time compression: same count in half the duration
    if kind is ChallengeTag.SCALE_VARIATION:
        out = np.empty_like(frames)
        zooms = 1.0 + 0.3 * np.sin(2.0 * np.pi * np.arange(t) / max(t, 1))
        base = np.arange(h, dtype=np.float64)
        for i, z in enumerate(zooms):
            idx = np.clip(((base - h / 2.0) / z + h / 2.0).round().astype(int), 0, h - 1)
            out[i] = frames[i][np.ix_(idx, idx)]
        return out
    if kind is ChallengeTag.CLUTTERED_BACKGROUND:
        out = frames.copy()
        for _ in range(3):
            cy, cx = rng.integers(0, h, size=2)
            r = max(2, h // 10)
            y0, y1 = max(0, cy - r), min(h, cy + r)
            x0, x1 = max(0, cx - r), min(w, cx + r)
            out[:, y0:y1, x0:x1] = np.maximum(out[:, y0:y1, x0:x1], 140)
        return out
    if kind is ChallengeTag.CAMERA_VIEWPOINT_CHANGES:
        out = np.empty_like(frames)
        shifts = (0.25 * w * np.sin(np.pi * np.arange(t) / max(t, 1))).round().astype(int)
        for i, s in enumerate(shifts):
            out[i] = np.roll(frames[i], s, axis=1)
        return out
    raise ValueError(f"no synthetic degradation for {kind}")


def synth_generate(
    spec: SyntheticSpec,
    seed: int,
    video_id: str | None = None,
    split: str = "train",
) -> tuple[np.ndarray, AudioWaveform, VideoRecord]:
    """Deterministically generate (frames, waveform, record) for one video."""
    rng = np.random.default_rng(seed)
    boundaries = _cycle_boundaries(spec, rng)
    duration = boundaries[-1]
    n_frames = max(2, int(round(duration * spec.fps)))
    times = np.arange(n_frames) / spec.fps
    phase = _phase(times, boundaries)
    frames = _render_frames(spec, phase, rng)
    wave = _synth_audio(spec, boundaries, rng)
    tags: frozenset[ChallengeTag] = frozenset()
    if spec.degradation is not None:
        frames = _degrade(frames, spec.degradation, rng)
        tags = frozenset({spec.degradation})
    record = VideoRecord(
        video_id=video_id or f"synth-{seed}",
        media_path=f"memory://{video_id or f'synth-{seed}'}",
        audio_path=f"memory://{video_id or f'synth-{seed}'}/audio",
        split=split,
        count=CountLabel(float(spec.count)),
        segment=(0.0, frames.shape[0] / spec.fps),
        fps=spec.fps,
        action_class=f"{spec.visual_pattern.value}+{spec.audio_pattern.value}",
        challenge_tags=tags,
    )
    return frames, AudioWaveform(samples=wave, sample_rate=spec.sample_rate), record


@dataclass
class SyntheticDatasetConfig:
    n_train: int = 32
    n_val: int = 8
    n_test: int = 0
    seed: int = 0
    count_range: tuple[int, int] = (3, 6)
    period_range_s: tuple[float, float] = (0.8, 1.4)
    period_jitter: float = 0.05
    noise_level: float = 0.2
    audio_noise_level: float | None = None
    resolution: int = 24
    fps: float = 25.0
    sample_rate: int = 16000
    degraded_fraction: float = 0.0
    degradations: tuple[ChallengeTag, ...] = (
        ChallengeTag.LOW_ILLUMINATION,
        ChallengeTag.DISAPPEARING_ACTIVITY,
    )


def build_synthetic_dataset(
    cfg: SyntheticDatasetConfig,
) -> tuple[DatasetManifest, InMemoryMediaStore]:
    """Generate a seeded in-memory dataset with train/val/test splits."""
    rng = np.random.default_rng(cfg.seed)
    store = InMemoryMediaStore()
    records: list[VideoRecord] = []
    plan = [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)]
    for split, n in plan:
        for i in range(n):
            video_id = f"synth-{split}-{i:04d}"
            degradation = None
            if cfg.degraded_fraction > 0 and rng.random() < cfg.degraded_fraction:
                degradation = cfg.degradations[int(rng.integers(len(cfg.degradations)))]
            spec = SyntheticSpec(
                count=int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1)),
                period_s=float(rng.uniform(*cfg.period_range_s)),
                period_jitter=cfg.period_jitter,
                visual_pattern=list(VisualPattern)[int(rng.integers(2))],
                audio_pattern=list(AudioPattern)[int(rng.integers(2))],
                noise_level=cfg.noise_level,
                audio_noise_level=cfg.audio_noise_level,
                degradation=degradation,
                resolution=cfg.resolution,
                fps=cfg.fps,
                sample_rate=cfg.sample_rate,
            )
            frames, wave, record = synth_generate(
                spec, seed=int(rng.integers(2**31)), video_id=video_id, split=split
            )
            store.add(video_id, frames, wave)
            records.append(record)
    return DatasetManifest(records), store


def materialize_synthetic_dataset(cfg: SyntheticDatasetConfig, out_dir: str | Path) -> Path:
    """Write the dataset as frame directories, PCM WAV files, and a manifest;
    returns the manifest path."""
    from PIL import Image

    out = Path(out_dir)
    manifest, store = build_synthetic_dataset(cfg)
    rewritten: list[VideoRecord] = []
    for record in manifest:
        frames = store.frames(record)
        wave = store.audio(record)
        frame_dir = out / "frames" / record.video_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        for i in range(frames.shape[0]):
            Image.fromarray(frames[i]).save(frame_dir / f"f{i:05d}.png")
        audio_path = out / "audio" / f"{record.video_id}.wav"
        audio_path.parent.mkdir(parents=True, exist_ok=True)
        pcm = np.clip(wave.samples * 32767.0, -32768, 32767).astype(np.int16)
        wavfile.write(str(audio_path), wave.sample_rate, pcm)
        rewritten.append(
            replace(
                record,
                media_path=str(frame_dir.relative_to(out)),
                audio_path=str(audio_path.relative_to(out)),
            )
        )
    manifest_path = out / "manifest.jsonl"
    save_manifest(manifest_path, DatasetManifest(rewritten))
    return manifest_path
