"""Visual counting stream: a 3D convolutional backbone over fixed-length
frame clips sampled at a temporal stride, feeding the shared counting head.

The backbone exposes two outputs per clip: the final feature vector for the
head, and a mid-level activation map (third block) consumed by the stride
scorer and the reliability gate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .blocks import ConvBlock3d, SepConv3d, global_avg_pool
from .errors import DomainError
from .heads import CountingHead, HeadConfig, HeadOutput
from .metrics import CountPrediction, Modality

log = logging.getLogger(__name__)


@dataclass
class SightBackboneConfig:
    variant: str = "tiny"  # "tiny" or "full"
    feature_dim: int = 64
    clip_len: int = 64
    resolution: int = 112
    tiny_channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.variant not in ("tiny", "full"):
            raise ValueError(f"unknown sight backbone variant {self.variant!r}")
        if self.variant == "full" and self.feature_dim != 512:
            self.feature_dim = 512
        if self.clip_len < 2 or self.resolution < 8:
            raise ValueError("clip_len must be >= 2 and resolution >= 8")


@dataclass
class VideoClip:
    """Fixed-length frame clip with the stride bookkeeping needed to map it
    back into the source video."""

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    stride: int
    source_span: tuple[int, int]

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"clip frames must be (T, H, W, 3), got {f.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        start, end = self.source_span
        if end - start != (f.shape[0] - 1) * self.stride:
            raise ValueError(
                f"span {self.source_span} inconsistent with {f.shape[0]} frames at stride {self.stride}"
            )

    def to_tensor(self) -> Tensor:
        """(3, T, H, W) float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.frames.transpose(3, 0, 1, 2)))


def clip_indices(start: int, stride: int, clip_len: int, n_frames: int) -> np.ndarray:
    """Frame indices {start, start+stride, ...}, clamped to the last frame so
    short videos are padded by repeating their final frame."""
    if n_frames < 1:
        raise ValueError("cannot sample a clip from an empty video")
    idx = start + stride * np.arange(clip_len)
    return np.clip(idx, 0, n_frames - 1)


def sample_clip(frames: np.ndarray, start: int, stride: int, clip_len: int) -> VideoClip:
    """Build a clip from decoded frames; uint8 input is scaled to [0, 1]."""
    idx = clip_indices(start, stride, clip_len, frames.shape[0])
    data = frames[idx]
    if data.dtype == np.uint8:
        data = data.astype(np.float32) / 255.0
    else:
        data = np.clip(data.astype(np.float32), 0.0, 1.0)
    return VideoClip(frames=data, stride=stride, source_span=(start, start + (clip_len - 1) * stride))


class SightBackbone(nn.Module):
    """3D conv feature extractor with a mid-level tap after the third block."""

    def __init__(self, config: SightBackboneConfig):
        super().__init__()
        self.config = config
        if config.variant == "tiny":
            c1, c2, c3 = config.tiny_channels
            self.block1 = ConvBlock3d(3, c1, pool=(1, 2, 2))
            self.block2 = ConvBlock3d(c1, c2, pool=(2, 2, 2))
            self.block3 = ConvBlock3d(c2, c3, pool=(2, 2, 2))
            self.block4 = ConvBlock3d(c3, config.feature_dim)
            self.tap_channels = c3
        else:
            self.block1 = nn.Sequential(SepConv3d(3, 64, spatial_stride=2), nn.MaxPool3d((1, 2, 2)))
            self.block2 = nn.Sequential(SepConv3d(64, 128), nn.MaxPool3d(2))
            self.block3 = nn.Sequential(SepConv3d(128, 256), nn.MaxPool3d(2))
            self.block4 = SepConv3d(256, config.feature_dim)
            self.tap_channels = 256

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: (B, 3, T, H, W) -> (feature (B, D), mid (B, C, T', H', W'))."""
        x = self.block2(self.block1(x))
        mid = self.block3(x)
        return global_avg_pool(self.block4(mid)), mid


class SightStream(nn.Module):
    """Backbone plus counting head; produces per-clip sight counts."""

    def __init__(self, backbone_config: SightBackboneConfig, head_config: HeadConfig):
        super().__init__()
        if head_config.feature_dim != backbone_config.feature_dim:
            raise ValueError("head feature_dim must match backbone feature_dim")
        self.backbone = SightBackbone(backbone_config)
        self.head = CountingHead(head_config)

    @property
    def clip_len(self) -> int:
        return self.backbone.config.clip_len

    def _check(self, x: Tensor):
        cfg = self.backbone.config
        if x.shape[1:] != (3, cfg.clip_len, cfg.resolution, cfg.resolution):
            raise ValueError(
                f"clip batch shape {tuple(x.shape)} does not match config "
                f"(3, {cfg.clip_len}, {cfg.resolution}, {cfg.resolution})"
            )
        if not torch.isfinite(x).all():
            raise DomainError("clip contains non-finite values")

    def forward(self, x: Tensor) -> tuple[Tensor, HeadOutput, Tensor, Tensor]:
        """x: (B, 3, T, H, W) -> (clamped counts (B,), head output, mid, feature)."""
        self._check(x)
        feature, mid = self.backbone(x)
        out = self.head(feature)
        return out.count.clamp(min=0.0), out, mid, feature

    @torch.no_grad()
    def extract_features(self, clip: VideoClip) -> tuple[Tensor, Tensor]:
        """Final feature vector plus the mid-level tap for one clip."""
        self._check(clip.to_tensor().unsqueeze(0))
        feature, mid = self.backbone(clip.to_tensor().unsqueeze(0))
        return feature[0], mid[0]

    @torch.no_grad()
    def count_clip(self, clip: VideoClip) -> tuple[CountPrediction, HeadOutput, Tensor]:
        """Single-clip inference; count is clamped to >= 0 at this boundary."""
        counts, out, mid, _ = self.forward(clip.to_tensor().unsqueeze(0))
        pred = CountPrediction(value=float(counts[0]), modality=Modality.SIGHT)
        return pred, out, mid[0]


def maybe_load_pretrained(module: nn.Module, path: str | Path | None) -> bool:
    """Optional pretrained-weight hook; a missing checkpoint is not an error."""
    if path is None:
        return False
    path = Path(path)
    if not path.exists():
        log.info("no pretrained checkpoint at %s; training from scratch", path)
        return False
    module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return True
