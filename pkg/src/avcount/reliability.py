"""Reliability estimation and late fusion of the two modality counts.

The gate maps the visual feature vector plus the audio mid-level tap to a
sigmoid confidence gamma for the sound modality; the fused count is the
convex combination c_sight * (1 - gamma) + c_sound * gamma. The gate trains
on empirical predictions: per-video stream predictions averaged over the
training epochs whose validation loss was good enough.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import torch
from torch import Tensor, nn

from .blocks import ResidualBlock2d, global_avg_pool
from .errors import DomainError
from .metrics import CountPrediction, Modality

log = logging.getLogger(__name__)


@dataclass
class ReliabilityConfig:
    theta_r_v: float = 0.36  # validation-loss threshold for sight recordings
    theta_r_a: float = 0.40  # same for sound
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 8

    def __post_init__(self):
        if self.theta_r_v <= 0 or self.theta_r_a <= 0:
            raise ValueError("recording thresholds must be positive")


@dataclass
class EmpiricalEntry:
    sight_pred: float | None = None
    sound_pred: float | None = None
    n_recordings_sight: int = 0
    n_recordings_sound: int = 0
    sight_fallback: bool = False
    sound_fallback: bool = False


@dataclass
class EpochRecording:
    """Per-epoch training hook payload: which stream, the epoch's validation
    relative MAE, and the model's predictions over the training videos."""

    stream: str  # "sight" or "sound"
    val_relative_mae: float
    predictions: dict[str, float]


class EmpiricalPredictionTable:
    """Per-video averaged stream predictions, persisted as one JSON record
    per line keyed by video_id."""

    def __init__(self, per_video: dict[str, EmpiricalEntry] | None = None):
        self.per_video: dict[str, EmpiricalEntry] = per_video or {}

    def __len__(self) -> int:
        return len(self.per_video)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.per_video

    def get(self, video_id: str) -> EmpiricalEntry | None:
        return self.per_video.get(video_id)

    def merge_stream(self, stream: str, other: "EmpiricalPredictionTable") -> None:
        """Overwrite one stream's columns from another table, keeping the
        other stream's columns intact."""
        for video_id, entry in other.per_video.items():
            mine = self.per_video.setdefault(video_id, EmpiricalEntry())
            if stream == "sight":
                mine.sight_pred = entry.sight_pred
                mine.n_recordings_sight = entry.n_recordings_sight
                mine.sight_fallback = entry.sight_fallback
            else:
                mine.sound_pred = entry.sound_pred
                mine.n_recordings_sound = entry.n_recordings_sound
                mine.sound_fallback = entry.sound_fallback

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for video_id in sorted(self.per_video):
                e = self.per_video[video_id]
                fh.write(
                    json.dumps(
                        {
                            "video_id": video_id,
                            "sight_pred": e.sight_pred,
                            "sound_pred": e.sound_pred,
                            "n_recordings_sight": e.n_recordings_sight,
                            "n_recordings_sound": e.n_recordings_sound,
                            "sight_fallback": e.sight_fallback,
                            "sound_fallback": e.sound_fallback,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "EmpiricalPredictionTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                table.per_video[d["video_id"]] = EmpiricalEntry(
                    sight_pred=d.get("sight_pred"),
                    sound_pred=d.get("sound_pred"),
                    n_recordings_sight=int(d.get("n_recordings_sight", 0)),
                    n_recordings_sound=int(d.get("n_recordings_sound", 0)),
                    sight_fallback=bool(d.get("sight_fallback", False)),
                    sound_fallback=bool(d.get("sound_fallback", False)),
                )
        return table


def collect_empirical_predictions(
    events: Iterable[EpochRecording],
    theta_by_stream: Mapping[str, float],
) -> EmpiricalPredictionTable:
    """Average per-video predictions over qualifying epochs per stream.

    An epoch qualifies when its validation relative MAE is below the stream's
    threshold. If no epoch of a stream qualifies, the final epoch's
    predictions are used as a logged fallback rather than stalling training.
    """
    events = list(events)
    table = EmpiricalPredictionTable()
    for stream in ("sight", "sound"):
        stream_events = [e for e in events if e.stream == stream]
        if not stream_events:
            continue
        theta = theta_by_stream[stream]
        qualifying = [e for e in stream_events if e.val_relative_mae < theta]
        fallback = False
        if not qualifying:
            qualifying = [stream_events[-1]]
            fallback = True
            log.warning(
                "no %s epoch went below threshold %.3f; falling back to final-model predictions",
                stream,
                theta,
            )
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for e in qualifying:
            for video_id, pred in e.predictions.items():
                sums[video_id] = sums.get(video_id, 0.0) + pred
                counts[video_id] = counts.get(video_id, 0) + 1
        for video_id in sums:
            entry = table.per_video.setdefault(video_id, EmpiricalEntry())
            avg = sums[video_id] / counts[video_id]
            if stream == "sight":
                entry.sight_pred = avg
                entry.n_recordings_sight = counts[video_id]
                entry.sight_fallback = fallback
            else:
                entry.sound_pred = avg
                entry.n_recordings_sound = counts[video_id]
                entry.sound_fallback = fallback
    return table


def fuse(c_v: CountPrediction, c_a: CountPrediction, gamma: float) -> CountPrediction:
    """Convex combination of the two modality counts under audio confidence
    gamma; gamma outside [0, 1] is an argument error."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    value = c_v.value * (1.0 - gamma) + c_a.value * gamma
    return CountPrediction(value=value, modality=Modality.FUSED)


def reliability_loss(fused, labels) -> Tensor:
    """Mean relative absolute error of fused counts against labels."""
    f = torch.as_tensor(fused)
    l = torch.as_tensor(labels)
    if not f.is_floating_point():
        f = f.double()
    l = l.to(f.dtype)
    if f.ndim == 0:
        f = f.unsqueeze(0)
    if l.ndim == 0:
        l = l.unsqueeze(0)
    if f.shape != l.shape:
        raise ValueError(f"fused shape {tuple(f.shape)} != labels shape {tuple(l.shape)}")
    if (l <= 0).any():
        raise DomainError("count labels must be strictly positive")
    return ((f - l).abs() / l).mean()


class ReliabilityGate(nn.Module):
    """One residual block over the audio tap, concatenated with the visual
    feature vector, one fully connected unit, sigmoid output."""

    def __init__(self, visual_feature_dim: int, audio_channels: int):
        super().__init__()
        self.audio_block = ResidualBlock2d(audio_channels, audio_channels, norm="group")
        self.fc = nn.Linear(visual_feature_dim + audio_channels, 1)

    def forward(self, visual_feature: Tensor, audio_mid: Tensor) -> Tensor:
        """(B, D) visual features and (B, C, F', L') audio taps -> gamma (B,)
        strictly inside (0, 1)."""
        if visual_feature.ndim != 2:
            raise ValueError(f"visual feature must be (B, D), got {tuple(visual_feature.shape)}")
        audio = global_avg_pool(self.audio_block(audio_mid))
        if visual_feature.shape[0] != audio.shape[0]:
            raise ValueError("visual and audio batch sizes differ")
        joint = torch.cat([visual_feature, audio], dim=1)
        if joint.shape[1] != self.fc.in_features:
            raise ValueError(
                f"gate expected {self.fc.in_features} joint features, got {joint.shape[1]}"
            )
        return torch.sigmoid(self.fc(joint)).squeeze(-1)
