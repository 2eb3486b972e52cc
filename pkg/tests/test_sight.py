"""Sight stream: clip bookkeeping, backbone contracts, counting smoke tests."""

import numpy as np
import pytest
import torch

from avcount.heads import HeadConfig, counting_loss
from avcount.metrics import Modality
from avcount.sight import (
    SightBackboneConfig,
    SightStream,
    VideoClip,
    clip_indices,
    maybe_load_pretrained,
    sample_clip,
)


def tiny_stream(clip_len=8, resolution=16, p=3, feature_dim=16):
    backbone = SightBackboneConfig(
        variant="tiny", feature_dim=feature_dim, clip_len=clip_len, resolution=resolution
    )
    head = HeadConfig(feature_dim=feature_dim, num_repetition_classes=p)
    return SightStream(backbone, head)


def make_frames(n=40, res=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 255, size=(n, res, res, 3), dtype=np.uint8)


class TestClipSampling:
    def test_indices_match_direct_subsampling(self):
        frames = make_frames(60)
        for stride in (1, 2, 3, 5):
            idx = clip_indices(4, stride, 8, 60)
            expected = np.array([4 + stride * i for i in range(8)])
            assert np.array_equal(idx, np.minimum(expected, 59))
            resampled = frames[::stride]
            direct = frames[idx]
            start_r = 4 // stride if 4 % stride == 0 else None
            if start_r is not None and start_r + 8 <= resampled.shape[0]:
                assert np.array_equal(direct, resampled[start_r : start_r + 8])

    def test_short_video_clamps_to_last_frame(self):
        frames = make_frames(5)
        clip = sample_clip(frames, 0, 3, 8)
        assert clip.frames.shape == (8, 16, 16, 3)
        last = frames[4].astype(np.float32) / 255.0
        assert np.allclose(clip.frames[-1], last)

    def test_span_invariant(self):
        clip = sample_clip(make_frames(64), 2, 4, 8)
        assert clip.source_span == (2, 2 + 7 * 4)

    def test_invalid_span_rejected(self):
        with pytest.raises(ValueError):
            VideoClip(frames=np.zeros((4, 8, 8, 3), np.float32), stride=2, source_span=(0, 5))

    def test_uint8_scaled_to_unit_range(self):
        clip = sample_clip(make_frames(16), 0, 1, 8)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0


class TestBackbone:
    def test_zero_init_zero_clip_gives_zero_feature(self):
        stream = tiny_stream()
        with torch.no_grad():
            for p in stream.parameters():
                p.zero_()
        x = torch.zeros(1, 3, 8, 16, 16)
        feat, mid = stream.backbone(x)
        assert torch.allclose(feat, torch.zeros_like(feat))
        assert torch.allclose(mid, torch.zeros_like(mid))

    def test_deterministic_features(self):
        stream = tiny_stream()
        stream.eval()
        x = torch.rand(2, 3, 8, 16, 16)
        with torch.no_grad():
            f1, m1 = stream.backbone(x)
            f2, m2 = stream.backbone(x)
        assert torch.equal(f1, f2)
        assert torch.equal(m1, m2)

    def test_full_variant_feature_length_512(self):
        cfg = SightBackboneConfig(variant="full", feature_dim=512, clip_len=16, resolution=32)
        head = HeadConfig(feature_dim=512, num_repetition_classes=4)
        stream = SightStream(cfg, head)
        with torch.no_grad():
            feat, mid = stream.backbone(torch.rand(1, 3, 16, 32, 32))
        assert feat.shape == (1, 512)
        assert mid.shape[1] == stream.backbone.tap_channels

    def test_mid_tap_shape_contract(self):
        stream = tiny_stream()
        with torch.no_grad():
            _, mid = stream.backbone(torch.rand(2, 3, 8, 16, 16))
        assert mid.ndim == 5
        assert mid.shape[:2] == (2, stream.backbone.tap_channels)


class TestSightCount:
    def test_zero_init_gives_zero_prediction(self):
        stream = tiny_stream()
        with torch.no_grad():
            for p in stream.parameters():
                p.zero_()
        clip = sample_clip(make_frames(30), 0, 2, 8)
        pred, out, mid = stream.count_clip(clip)
        assert pred.value == 0.0
        assert pred.modality is Modality.SIGHT

    def test_prediction_clamped_non_negative(self):
        torch.manual_seed(0)
        stream = tiny_stream()
        with torch.no_grad():
            stream.head.count_fc.bias.fill_(-100.0)
        clip = sample_clip(make_frames(30), 0, 1, 8)
        pred, _, _ = stream.count_clip(clip)
        assert pred.value == 0.0

    def test_single_class_head_equals_scalar_branch(self):
        torch.manual_seed(1)
        stream = tiny_stream(p=1)
        clip = sample_clip(make_frames(30, seed=2), 0, 1, 8)
        pred, out, _ = stream.count_clip(clip)
        assert pred.value == pytest.approx(max(0.0, float(out.per_class_counts[0, 0])), abs=1e-6)

    def test_finite_output_for_random_inputs(self):
        torch.manual_seed(2)
        stream = tiny_stream()
        for seed in range(3):
            clip = sample_clip(make_frames(25, seed=seed), 0, 2, 8)
            pred, _, _ = stream.count_clip(clip)
            assert np.isfinite(pred.value) and pred.value >= 0.0

    def test_shape_mismatch_rejected(self):
        stream = tiny_stream()
        with pytest.raises(ValueError):
            stream(torch.rand(1, 3, 9, 16, 16))

    def test_single_batch_training_step_descends(self):
        torch.manual_seed(3)
        stream = tiny_stream(clip_len=8, resolution=16, p=3)
        x = torch.rand(4, 3, 8, 16, 16)
        y = torch.tensor([2.0, 3.0, 4.0, 5.0])
        opt = torch.optim.SGD(stream.parameters(), lr=1e-3)
        counts, out, _, _ = stream(x)
        initial = counting_loss(counts, y, out.class_dist, stream.head.config)
        init_val = float(initial.detach())
        initial.backward()
        opt.step()
        opt.zero_grad()
        with torch.no_grad():
            counts2, out2, _, _ = stream(x)
            after = counting_loss(counts2, y, out2.class_dist, stream.head.config)
        assert float(after) < init_val


class TestPretrainedHook:
    def test_missing_checkpoint_is_not_an_error(self, tmp_path):
        stream = tiny_stream()
        assert maybe_load_pretrained(stream, tmp_path / "nope.pt") is False
        assert maybe_load_pretrained(stream, None) is False

    def test_roundtrip(self, tmp_path):
        stream = tiny_stream()
        path = tmp_path / "w.pt"
        torch.save(stream.state_dict(), path)
        other = tiny_stream()
        assert maybe_load_pretrained(other, path) is True
        for a, b in zip(stream.parameters(), other.parameters()):
            assert torch.equal(a, b)
