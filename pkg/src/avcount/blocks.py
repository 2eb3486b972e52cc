"""Convolutional building blocks shared by the backbones and the cross-modal
modules (stride scorer, reliability gate)."""

from __future__ import annotations

import torch
from torch import Tensor, nn


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


def _norm(channels: int, kind: str, dims: int) -> nn.Module:
    if kind == "group":
        return _group_norm(channels)
    if kind == "batch":
        return nn.BatchNorm3d(channels) if dims == 3 else nn.BatchNorm2d(channels)
    raise ValueError(f"unknown norm kind {kind!r}")


class ConvBlock3d(nn.Module):
    """conv3d -> norm -> relu -> optional max pool."""

    def __init__(self, cin: int, cout: int, pool=None, norm: str = "group"):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm = _norm(cout, norm, 3)
        self.pool = nn.MaxPool3d(pool) if pool else None

    def forward(self, x: Tensor) -> Tensor:
        x = torch.relu(self.norm(self.conv(x)))
        return self.pool(x) if self.pool else x


class ConvBlock2d(nn.Module):
    """conv2d -> norm -> relu -> optional max pool."""

    def __init__(self, cin: int, cout: int, stride=1, pool=None, norm: str = "group"):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = _norm(cout, norm, 2)
        self.pool = nn.MaxPool2d(pool) if pool else None

    def forward(self, x: Tensor) -> Tensor:
        x = torch.relu(self.norm(self.conv(x)))
        return self.pool(x) if self.pool else x


class ResidualBlock2d(nn.Module):
    """Basic two-conv residual block with an optional strided projection."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout, norm, 2)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout, norm, 2)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout, norm, 2)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return torch.relu(out + self.skip(x))


class ResidualBlock3d(nn.Module):
    """3D counterpart of ResidualBlock2d."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "group"):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout, norm, 3)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout, norm, 3)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), _norm(cout, norm, 3)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return torch.relu(out + self.skip(x))


class SepConv3d(nn.Module):
    """Separable spatiotemporal convolution: 1x3x3 spatial then 3x1x1 temporal."""

    def __init__(self, cin: int, cout: int, spatial_stride: int = 1, norm: str = "group"):
        super().__init__()
        self.spatial = nn.Conv3d(
            cin, cout, (1, 3, 3), stride=(1, spatial_stride, spatial_stride), padding=(0, 1, 1)
        )
        self.norm_s = _norm(cout, norm, 3)
        self.temporal = nn.Conv3d(cout, cout, (3, 1, 1), padding=(1, 0, 0))
        self.norm_t = _norm(cout, norm, 3)

    def forward(self, x: Tensor) -> Tensor:
        x = torch.relu(self.norm_s(self.spatial(x)))
        return torch.relu(self.norm_t(self.temporal(x)))


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over all trailing spatial/temporal axes, keeping (B, C)."""
    return x.flatten(2).mean(dim=2)
