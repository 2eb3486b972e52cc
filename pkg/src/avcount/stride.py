"""Cross-modal temporal-stride selection.

A small scorer ranks candidate frame-sampling strides from the two streams'
mid-level taps; it trains with a max-margin ranking loss over mined
positive/negative strides. The positive stride for a video is the smallest
one whose clip span covers at least two repetitions; negatives either cover
fewer than two repetitions or under-count relative to the positive stride by
more than the deviation threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from torch import Tensor, nn

from .blocks import ResidualBlock2d, ResidualBlock3d, global_avg_pool
from .sight import VideoClip

log = logging.getLogger(__name__)


@dataclass
class StrideModuleConfig:
    margin: float = 2.9
    theta_s: float = 0.29  # deviation threshold for negative mining
    max_stride_train: int = 8
    max_stride_infer: int = 5
    audio_enabled: bool = True
    epochs: int = 5
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0.0 < self.theta_s < 1.0:
            raise ValueError(f"theta_s must lie in (0, 1), got {self.theta_s}")
        if self.max_stride_train < 1 or self.max_stride_infer < 1:
            raise ValueError("maximum strides must be >= 1")


@dataclass
class StrideCandidate:
    stride: int
    clip: VideoClip | None = None
    score: float | None = None


@dataclass
class StrideMiningResult:
    video_id: str
    positive_stride: int
    negative_strides: tuple[int, ...]
    per_stride_counts: dict[int, float]
    deviations: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "video_id": self.video_id,
                "positive_stride": self.positive_stride,
                "negative_strides": list(self.negative_strides),
                "per_stride_counts": {str(k): v for k, v in self.per_stride_counts.items()},
                "deviations": {str(k): v for k, v in self.deviations.items()},
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "StrideMiningResult":
        d = json.loads(line)
        return cls(
            video_id=d["video_id"],
            positive_stride=int(d["positive_stride"]),
            negative_strides=tuple(int(s) for s in d["negative_strides"]),
            per_stride_counts={int(k): float(v) for k, v in d["per_stride_counts"].items()},
            deviations={int(k): float(v) for k, v in d.get("deviations", {}).items()},
        )


def save_mining_sidecar(path: str | Path, results: Mapping[str, StrideMiningResult | None]) -> None:
    """One record per video; videos skipped by mining persist as null markers
    so a restart does not re-mine them."""
    with open(path, "w", encoding="utf-8") as fh:
        for video_id in sorted(results):
            r = results[video_id]
            if r is None:
                fh.write(json.dumps({"video_id": video_id, "skipped": True}) + "\n")
            else:
                fh.write(r.to_json() + "\n")


def load_mining_sidecar(path: str | Path) -> dict[str, StrideMiningResult | None]:
    results: dict[str, StrideMiningResult | None] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            results[d["video_id"]] = None if d.get("skipped") else StrideMiningResult.from_json(line)
    return results


def covers_two_repetitions(stride: int, clip_len: int, mean_period_frames: float) -> bool:
    """Clip span (clip_len - 1) * stride must hold at least two mean periods."""
    return (clip_len - 1) * stride >= 2.0 * mean_period_frames


def smallest_covering_stride(clip_len: int, mean_period_frames: float, max_stride: int) -> int | None:
    for s in range(1, max_stride + 1):
        if covers_two_repetitions(s, clip_len, mean_period_frames):
            return s
    return None


def mine_strides(
    video_id: str,
    per_stride_counts: Mapping[int, float],
    clip_len: int,
    mean_period_frames: float,
    config: StrideModuleConfig,
) -> StrideMiningResult | None:
    """Classify candidate strides for one video given the trained sight
    stream's per-stride count predictions.

    Returns None (and logs) when no candidate covers two repetitions; the
    video is unusable for this training stage.
    """
    strides = sorted(per_stride_counts)
    positive = smallest_covering_stride(clip_len, mean_period_frames, max(strides))
    if positive is None or positive not in per_stride_counts:
        log.warning("video %s: no stride in %s covers two repetitions; skipped", video_id, strides)
        return None

    c_star = per_stride_counts[positive]
    negatives: set[int] = set()
    deviations: dict[int, float] = {positive: 0.0}
    for s in strides:
        if not covers_two_repetitions(s, clip_len, mean_period_frames):
            negatives.add(s)
        if s == positive:
            continue
        if c_star > 1e-8:
            delta = (c_star - per_stride_counts[s]) / c_star
            deviations[s] = delta
            if delta > config.theta_s:
                negatives.add(s)
    negatives.discard(positive)
    return StrideMiningResult(
        video_id=video_id,
        positive_stride=positive,
        negative_strides=tuple(sorted(negatives)),
        per_stride_counts=dict(per_stride_counts),
        deviations=deviations,
    )


def ranking_loss(neg_scores, pos_scores, margin: float) -> Tensor:
    """Max-margin ranking loss, mean(max(0, s_neg - s_pos + margin))."""
    neg = torch.as_tensor(neg_scores)
    pos = torch.as_tensor(pos_scores)
    if neg.ndim == 0:
        neg = neg.unsqueeze(0)
    if pos.ndim == 0:
        pos = pos.unsqueeze(0)
    if neg.shape != pos.shape:
        raise ValueError(f"score batches differ: {tuple(neg.shape)} vs {tuple(pos.shape)}")
    if not neg.is_floating_point():
        neg = neg.double()
    pos = pos.to(neg.dtype)
    return torch.clamp(neg - pos + margin, min=0.0).mean()


def select_stride(scores: Mapping[int, float]) -> tuple[int, float]:
    """Argmax over candidate scores; ties break toward the smaller stride."""
    if not scores:
        raise ValueError("no stride candidates to select from")
    best_stride, best_score = None, None
    for s in sorted(scores):
        if best_score is None or scores[s] > best_score:
            best_stride, best_score = s, scores[s]
    return best_stride, best_score


class StrideScorer(nn.Module):
    """One residual block per modality over the backbone taps, global average
    pooling, concatenation, and a single scoring unit. The audio branch is
    dropped entirely in visual-only mode."""

    def __init__(self, visual_channels: int, audio_channels: int | None = None):
        super().__init__()
        self.visual_block = ResidualBlock3d(visual_channels, visual_channels, norm="group")
        if audio_channels is not None:
            self.audio_block = ResidualBlock2d(audio_channels, audio_channels, norm="group")
            fc_in = visual_channels + audio_channels
        else:
            self.audio_block = None
            fc_in = visual_channels
        self.fc = nn.Linear(fc_in, 1)

    @property
    def audio_enabled(self) -> bool:
        return self.audio_block is not None

    def forward(self, visual_mid: Tensor, audio_mid: Tensor | None = None) -> Tensor:
        """(B, Cv, T', H', W') and optional (B, Ca, F', L') -> scores (B,)."""
        parts = [global_avg_pool(self.visual_block(visual_mid))]
        if self.audio_block is not None:
            if audio_mid is None:
                raise ValueError("scorer was built with an audio branch but got no audio features")
            parts.append(global_avg_pool(self.audio_block(audio_mid)))
        return self.fc(torch.cat(parts, dim=1)).squeeze(-1)
