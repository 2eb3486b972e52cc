"""Dataset manifests, the challenge-tag taxonomy, media ingestion, and clip
sampling with proportional label scaling.

Manifest format: UTF-8, one JSON record per line, '#' comment lines allowed.
Fields: video_id, media (frame directory or .npy), audio (optional WAV),
split, count, start_s, end_s, fps, action_class (optional), tags (optional).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ManifestError, MediaError
from .metrics import CountLabel
from .sight import VideoClip, clip_indices, sample_clip
from .sound import AudioWaveform

log = logging.getLogger(__name__)

MIN_SCALED_LABEL = 0.1  # floor keeps the relative-error loss finite


class ChallengeTag(str, Enum):
    CAMERA_VIEWPOINT_CHANGES = "camera_viewpoint_changes"
    CLUTTERED_BACKGROUND = "cluttered_background"
    LOW_ILLUMINATION = "low_illumination"
    FAST_MOTION = "fast_motion"
    DISAPPEARING_ACTIVITY = "disappearing_activity"
    SCALE_VARIATION = "scale_variation"
    LOW_RESOLUTION = "low_resolution"


SPLITS = ("train", "val", "test")


@dataclass
class VideoRecord:
    video_id: str
    media_path: str
    count: CountLabel
    segment: tuple[float, float]  # (start_s, end_s)
    split: str = "train"
    audio_path: str | None = None
    fps: float = 25.0
    action_class: str | None = None
    challenge_tags: frozenset[ChallengeTag] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        start, end = self.segment
        if end <= start:
            raise ValueError(f"segment end {end} must exceed start {start}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.challenge_tags = frozenset(ChallengeTag(t) for t in self.challenge_tags)

    @property
    def segment_seconds(self) -> float:
        return self.segment[1] - self.segment[0]

    def segment_frames(self, n_frames: int) -> tuple[int, int]:
        """Segment bounds as frame indices, clamped into the video."""
        s0 = max(0, int(round(self.segment[0] * self.fps)))
        s1 = min(n_frames, int(round(self.segment[1] * self.fps)))
        return s0, max(s1, s0 + 1)

    def mean_period_frames(self, n_frames: int | None = None) -> float:
        """Average repetition length in frames under the uniform-period
        assumption (only counts are annotated, not boundaries)."""
        if n_frames is None:
            seg = self.segment_seconds * self.fps
        else:
            s0, s1 = self.segment_frames(n_frames)
            seg = s1 - s0
        return seg / self.count.value

    def to_json(self) -> str:
        d = {
            "video_id": self.video_id,
            "media": self.media_path,
            "split": self.split,
            "count": self.count.value,
            "start_s": self.segment[0],
            "end_s": self.segment[1],
            "fps": self.fps,
        }
        if self.audio_path is not None:
            d["audio"] = self.audio_path
        if self.action_class is not None:
            d["action_class"] = self.action_class
        if self.challenge_tags:
            d["tags"] = sorted(t.value for t in self.challenge_tags)
        return json.dumps(d)


class DatasetManifest:
    def __init__(self, records: list[VideoRecord]):
        self.records = list(records)
        self._by_id = {r.video_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ManifestError("duplicate video_ids in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def has_tags(self) -> bool:
        return any(r.challenge_tags for r in self.records)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a line-delimited manifest; schema violations raise
    ManifestError carrying the offending line number."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[VideoRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                d = json.loads(line)
                record = VideoRecord(
                    video_id=d["video_id"],
                    media_path=d["media"],
                    audio_path=d.get("audio"),
                    split=d.get("split", "train"),
                    count=CountLabel(float(d["count"])),
                    segment=(float(d["start_s"]), float(d["end_s"])),
                    fps=float(d.get("fps", 25.0)),
                    action_class=d.get("action_class"),
                    challenge_tags=frozenset(d.get("tags", ())),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise ManifestError(f"{path}:{lineno}: invalid record: {e}") from e
            if record.video_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate video_id {record.video_id!r}")
            seen.add(record.video_id)
            records.append(record)
    if not records:
        log.warning("manifest %s contains no records", path)
    return DatasetManifest(records)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(r.to_json() + "\n")


class FileMediaStore:
    """Resolves record media paths: a directory of per-frame images read in
    lexicographic order, or a single .npy array of frames; audio is a linear
    PCM WAV. Raw container decoding is out of scope by design."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else None

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def frames(self, record: VideoRecord) -> np.ndarray:
        path = self._resolve(record.media_path)
        if path.is_dir():
            from PIL import Image

            files = sorted(f for f in path.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg"))
            if not files:
                raise MediaError(f"no frame images in {path}")
            frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
            return frames
        if path.suffix == ".npy":
            try:
                arr = np.load(path)
            except OSError as e:
                raise MediaError(f"cannot read frame array {path}: {e}") from e
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise MediaError(f"{path}: frame array must be (T, H, W, 3), got {arr.shape}")
            return arr
        raise MediaError(f"unsupported media {path}; expected a frame directory or .npy array")

    def audio(self, record: VideoRecord) -> AudioWaveform | None:
        if record.audio_path is None:
            return None
        return AudioWaveform.from_file(self._resolve(record.audio_path))


class CachingMediaStore:
    """Keeps decoded frames/audio in RAM; training loops revisit every video
    each epoch and desk-scale datasets fit comfortably in memory."""

    def __init__(self, inner):
        self.inner = inner
        self._frames: dict[str, np.ndarray] = {}
        self._audio: dict[str, AudioWaveform | None] = {}

    def frames(self, record: VideoRecord) -> np.ndarray:
        if record.video_id not in self._frames:
            self._frames[record.video_id] = self.inner.frames(record)
        return self._frames[record.video_id]

    def audio(self, record: VideoRecord) -> AudioWaveform | None:
        if record.video_id not in self._audio:
            self._audio[record.video_id] = self.inner.audio(record)
        return self._audio[record.video_id]


class InMemoryMediaStore:
    """Media store backed by arrays already in RAM; used by the synthetic
    training harness so the core loops have no codec or disk dependency."""

    def __init__(self):
        self._frames: dict[str, np.ndarray] = {}
        self._audio: dict[str, AudioWaveform] = {}

    def add(self, video_id: str, frames: np.ndarray, waveform: AudioWaveform | None = None):
        self._frames[video_id] = frames
        if waveform is not None:
            self._audio[video_id] = waveform

    def frames(self, record: VideoRecord) -> np.ndarray:
        try:
            return self._frames[record.video_id]
        except KeyError:
            raise MediaError(f"no in-memory frames for {record.video_id}") from None

    def audio(self, record: VideoRecord) -> AudioWaveform | None:
        return self._audio.get(record.video_id)


def clip_sampler(
    record: VideoRecord,
    frames: np.ndarray,
    stride: int,
    clip_len: int,
    offset_rng: np.random.Generator | None = None,
) -> tuple[VideoClip, float]:
    """Sample one clip at the given stride from within the annotated segment.

    The label is the video count scaled by the fraction of the segment the
    clip's nominal span overlaps, floored at MIN_SCALED_LABEL: only video-
    level counts exist, so clip labels assume uniformly spread repetitions.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = frames.shape[0]
    if n < 1:
        raise MediaError(f"{record.video_id}: empty video")
    s0, s1 = record.segment_frames(n)
    span = (clip_len - 1) * stride
    latest = max(s0, s1 - 1 - span)
    if offset_rng is not None and latest > s0:
        start = int(offset_rng.integers(s0, latest + 1))
    else:
        start = s0
    clip = sample_clip(frames, start, stride, clip_len)
    overlap = max(0, min(start + span, s1 - 1) - max(start, s0) + 1)
    scaled = record.count.value * overlap / (s1 - s0)
    return clip, max(scaled, MIN_SCALED_LABEL)
