"""Audio counting stream: STFT magnitude spectrograms segmented to a fixed
width, a 2D convolutional backbone with a third-block tap, and the shared
counting head. Per-segment counts sum to the video-level sound prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly
from torch import Tensor, nn

from .blocks import ConvBlock2d, ResidualBlock2d, global_avg_pool
from .errors import DomainError, MediaError
from .heads import CountingHead, HeadConfig, HeadOutput
from .metrics import CountPrediction, Modality


@dataclass
class SpectrogramConfig:
    sample_rate: int = 16000
    fft_size: int = 512
    window: str = "hann"
    hop: int = 250
    log_compression: bool = True
    segment_frames: int = 500

    def __post_init__(self):
        if min(self.sample_rate, self.fft_size, self.hop, self.segment_frames) < 1:
            raise ValueError("spectrogram sizes must be positive")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class AudioWaveform:
    samples: np.ndarray  # mono, normalized amplitude in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 2:  # stereo: average to mono
            self.samples = self.samples.mean(axis=1)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1D sample array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @classmethod
    def from_file(cls, path: str | Path) -> "AudioWaveform":
        """Load a linear-PCM WAV file; integer formats are rescaled to [-1, 1]."""
        try:
            rate, data = wavfile.read(str(path))
        except (OSError, ValueError) as e:
            raise MediaError(f"cannot read PCM audio {path}: {e}") from e
        if np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
        return cls(samples=data, sample_rate=int(rate))


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (freq_bins, time_frames), non-negative

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 2:
            raise ValueError(f"spectrogram must be 2D, got shape {self.magnitudes.shape}")
        if self.magnitudes.size and self.magnitudes.min() < 0:
            raise DomainError("spectrogram magnitudes must be non-negative")

    @property
    def freq_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[1]


def stft_spectrogram(waveform: AudioWaveform, config: SpectrogramConfig) -> Spectrogram:
    """Magnitude STFT with valid framing: frame k covers samples
    [k*hop, k*hop + fft_size), no padding, so L = (n - fft)//hop + 1."""
    x = waveform.samples
    if waveform.sample_rate != config.sample_rate:
        g = gcd(config.sample_rate, waveform.sample_rate)
        x = resample_poly(x, config.sample_rate // g, waveform.sample_rate // g)
    if x.size < config.fft_size:
        raise DomainError(
            f"waveform of {x.size} samples is shorter than one {config.fft_size}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, config.fft_size)[:: config.hop]
    win = get_window(config.window, config.fft_size)
    mag = np.abs(np.fft.rfft(frames * win, axis=1)).T  # (freq_bins, L)
    if config.log_compression:
        mag = np.log1p(mag)
    return Spectrogram(magnitudes=mag)


def _linear_resize_time(mag: np.ndarray, target: int) -> np.ndarray:
    n = mag.shape[1]
    if n == target:
        return mag.copy()
    if n == 1:
        return np.repeat(mag, target, axis=1)
    pos = np.linspace(0.0, n - 1, target)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    return mag[:, lo] * (1.0 - w) + mag[:, hi] * w


def segment_and_resize(spec: Spectrogram, n_segments: int) -> list[Spectrogram]:
    """Linearly interpolate the time axis to n_segments * segment_frames and
    split into consecutive fixed-width segments (canonical width 500)."""
    if n_segments < 1:
        raise ValueError(f"n_segments must be >= 1, got {n_segments}")
    if spec.num_frames < 1:
        raise DomainError("cannot segment an empty spectrogram")
    width = 500
    resized = _linear_resize_time(spec.magnitudes, n_segments * width)
    return [Spectrogram(magnitudes=resized[:, i * width : (i + 1) * width]) for i in range(n_segments)]


@dataclass
class SoundBackboneConfig:
    variant: str = "tiny"  # "tiny" or "full" (ResNet-18 layout)
    feature_dim: int = 64
    freq_bins: int = 257
    tiny_channels: tuple[int, ...] = (12, 24, 48)

    def __post_init__(self):
        if self.variant not in ("tiny", "full"):
            raise ValueError(f"unknown sound backbone variant {self.variant!r}")
        if self.variant == "full" and self.feature_dim != 512:
            self.feature_dim = 512


class SoundBackbone(nn.Module):
    """2D conv feature extractor over single-channel spectrograms; the tap is
    the third stage (third residual block group in the full variant)."""

    def __init__(self, config: SoundBackboneConfig):
        super().__init__()
        self.config = config
        if config.variant == "tiny":
            c1, c2, c3 = config.tiny_channels
            self.stem = ConvBlock2d(1, c1, stride=(2, 4), pool=2)
            self.stage2 = ConvBlock2d(c1, c2, pool=2)
            self.stage3 = ConvBlock2d(c2, c3, pool=2)
            self.stage4 = ConvBlock2d(c3, config.feature_dim)
            self.tap_channels = c3
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(64),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            self.stage1 = nn.Sequential(ResidualBlock2d(64, 64), ResidualBlock2d(64, 64))
            self.stage2 = nn.Sequential(ResidualBlock2d(64, 128, stride=2), ResidualBlock2d(128, 128))
            self.stage3 = nn.Sequential(ResidualBlock2d(128, 256, stride=2), ResidualBlock2d(256, 256))
            self.stage4 = nn.Sequential(ResidualBlock2d(256, 512, stride=2), ResidualBlock2d(512, 512))
            self.tap_channels = 256

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: (B, 1, F, L) -> (feature (B, D), mid (B, C, F', L'))."""
        x = self.stem(x)
        if self.config.variant == "full":
            x = self.stage1(x)
        x = self.stage2(x)
        mid = self.stage3(x)
        return global_avg_pool(self.stage4(mid)), mid


class SoundStream(nn.Module):
    """Backbone plus counting head over spectrogram segments."""

    def __init__(self, backbone_config: SoundBackboneConfig, head_config: HeadConfig):
        super().__init__()
        if head_config.feature_dim != backbone_config.feature_dim:
            raise ValueError("head feature_dim must match backbone feature_dim")
        self.backbone = SoundBackbone(backbone_config)
        self.head = CountingHead(head_config)

    def forward(self, x: Tensor) -> tuple[Tensor, HeadOutput, Tensor, Tensor]:
        """x: (B, 1, F, L) -> (clamped counts (B,), head output, mid, feature)."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.backbone.config.freq_bins:
            raise ValueError(
                f"segment batch shape {tuple(x.shape)} does not match "
                f"(B, 1, {self.backbone.config.freq_bins}, L)"
            )
        if not torch.isfinite(x).all():
            raise DomainError("spectrogram batch contains non-finite values")
        feature, mid = self.backbone(x)
        out = self.head(feature)
        return out.count.clamp(min=0.0), out, mid, feature

    @torch.no_grad()
    def count_segments(
        self, segments: list[Spectrogram]
    ) -> tuple[CountPrediction, list[HeadOutput], Tensor]:
        """Sum per-segment counts into one sound prediction; the returned mid
        feature is the first segment's tap, used by the cross-modal modules."""
        if not segments:
            raise ValueError("need at least one spectrogram segment")
        batch = torch.stack(
            [torch.from_numpy(s.magnitudes.astype(np.float32)).unsqueeze(0) for s in segments]
        )
        counts, out, mid, _ = self.forward(batch)
        pred = CountPrediction(value=float(counts.sum()), modality=Modality.SOUND)
        outputs = [
            HeadOutput(out.per_class_counts[i], out.class_dist[i], out.count[i])
            for i in range(len(segments))
        ]
        return pred, outputs, mid[0]
