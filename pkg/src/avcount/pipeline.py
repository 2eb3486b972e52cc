"""Training orchestration, the full inference procedure, and evaluation.

Stage order matters: the stride scorer needs a trained sight stream plus the
mining sidecar, and the reliability gate needs both streams plus the
empirical-prediction table produced by their training hooks. Each stage run
writes its weights and a RunRecord.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import stride as stride_mod
from .config import RunConfig, RunRecord
from .datasets import (
    CachingMediaStore,
    DatasetManifest,
    FileMediaStore,
    VideoRecord,
    clip_sampler,
    load_manifest,
)
from .errors import ConfigError, DependencyError
from .heads import HeadConfig, Supervision, counting_loss
from .metrics import CountPrediction, EvalReport, Modality, evaluate_report, mae
from .reliability import (
    EmpiricalPredictionTable,
    EpochRecording,
    ReliabilityGate,
    collect_empirical_predictions,
    fuse,
    reliability_loss,
)
from .sight import SightBackboneConfig, SightStream, sample_clip
from .sound import (
    AudioWaveform,
    SoundBackboneConfig,
    SoundStream,
    Spectrogram,
    SpectrogramConfig,
    segment_and_resize,
    stft_spectrogram,
)
from .stride import StrideModuleConfig, StrideScorer, ranking_loss, select_stride

log = logging.getLogger(__name__)

WEIGHT_FILES = {
    "sight": "sight.pt",
    "sound": "sound.pt",
    "scorer": "stride_scorer.pt",
    "gate": "reliability_gate.pt",
}
MINING_SIDECAR = "stride_mining.jsonl"
EMPIRICAL_TABLE = "empirical_predictions.jsonl"


def seed_everything(seed: int, deterministic: bool = True) -> np.random.Generator:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ModelBundle:
    sight: SightStream | None = None
    sound: SoundStream | None = None
    scorer: StrideScorer | None = None
    gate: ReliabilityGate | None = None

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise DependencyError(f"missing trained artifact: {name} ({WEIGHT_FILES[name]})")


def spectrogram_config(cfg: RunConfig) -> SpectrogramConfig:
    return SpectrogramConfig(
        sample_rate=cfg.sample_rate,
        fft_size=cfg.fft_size,
        window=cfg.stft_window,
        hop=cfg.stft_hop,
        log_compression=cfg.log_compression,
    )


def stride_config(cfg: RunConfig) -> StrideModuleConfig:
    return StrideModuleConfig(
        margin=cfg.margin,
        theta_s=cfg.theta_s,
        max_stride_train=cfg.max_stride_train,
        max_stride_infer=cfg.max_stride_infer,
        audio_enabled=not cfg.no_audio,
        epochs=cfg.stride_train.epochs,
        learning_rate=cfg.stride_train.learning_rate,
    )


def build_sight(cfg: RunConfig) -> SightStream:
    backbone = SightBackboneConfig(
        variant=cfg.sight_variant,
        feature_dim=cfg.sight_feature_dim,
        clip_len=cfg.clip_len,
        resolution=cfg.resolution,
    )
    head = HeadConfig(
        feature_dim=backbone.feature_dim,
        num_repetition_classes=cfg.p_sight,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        supervision=Supervision(cfg.supervision),
    )
    return SightStream(backbone, head)


def build_sound(cfg: RunConfig) -> SoundStream:
    backbone = SoundBackboneConfig(
        variant=cfg.sound_variant,
        feature_dim=cfg.sound_feature_dim,
        freq_bins=cfg.fft_size // 2 + 1,
    )
    head = HeadConfig(
        feature_dim=backbone.feature_dim,
        num_repetition_classes=cfg.p_sound,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        supervision=Supervision(cfg.supervision),
    )
    return SoundStream(backbone, head)


def build_scorer(cfg: RunConfig, sight: SightStream, sound: SoundStream | None) -> StrideScorer:
    audio_channels = None
    if not cfg.no_audio:
        if sound is None:
            raise DependencyError("stride scorer with audio enabled needs the sound stream")
        audio_channels = sound.backbone.tap_channels
    return StrideScorer(sight.backbone.tap_channels, audio_channels)


def build_gate(cfg: RunConfig, sight: SightStream, sound: SoundStream) -> ReliabilityGate:
    return ReliabilityGate(sight.backbone.config.feature_dim, sound.backbone.tap_channels)


# config fields a weights directory must pin so later stages and evaluation
# rebuild the exact architectures that were trained
ARCH_KEYS = (
    "sight_variant",
    "sight_feature_dim",
    "clip_len",
    "resolution",
    "sound_variant",
    "sound_feature_dim",
    "p_sight",
    "p_sound",
    "lambda1",
    "lambda2",
    "supervision",
    "sample_rate",
    "fft_size",
    "stft_hop",
    "stft_window",
    "log_compression",
)
ARCH_FILE = "models.json"


def _read_arch(weights_dir: Path) -> dict:
    path = weights_dir / ARCH_FILE
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def arch_config(cfg: RunConfig, weights_dir: str | Path) -> RunConfig:
    """Config with model dimensions pinned by the weights directory's
    architecture record, when one exists."""
    arch = _read_arch(Path(weights_dir))
    stream_keys = {k: v for k, v in arch.items() if k in ARCH_KEYS}
    if not stream_keys:
        return cfg
    return RunConfig.from_dict({**cfg.to_dict(), **stream_keys, "overrides": []})


def save_models(models: ModelBundle, weights_dir: str | Path, cfg: RunConfig | None = None) -> None:
    weights_dir = Path(weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    for name, filename in WEIGHT_FILES.items():
        module = getattr(models, name)
        if module is not None:
            torch.save(module.state_dict(), weights_dir / filename)
    if cfg is not None:
        arch = _read_arch(weights_dir)
        arch.update({k: getattr(cfg, k) for k in ARCH_KEYS})
        if models.scorer is not None:
            arch["scorer_visual_only"] = not models.scorer.audio_enabled
        with open(weights_dir / ARCH_FILE, "w", encoding="utf-8") as fh:
            json.dump(arch, fh, indent=2, sort_keys=True)


def load_models(cfg: RunConfig, weights_dir: str | Path | None = None) -> ModelBundle:
    """Instantiate models and load any weights present.

    The architecture record written at training time takes precedence over
    the current config's model dimensions, so evaluation does not depend on
    repeating every training flag.
    """
    weights_dir = Path(weights_dir or cfg.weights_dir)
    arch = _read_arch(weights_dir)
    cfg = arch_config(cfg, weights_dir)
    models = ModelBundle()

    def _load(name: str, module) -> bool:
        path = weights_dir / WEIGHT_FILES[name]
        if not path.exists():
            return False
        module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        module.eval()
        setattr(models, name, module)
        return True

    sight = build_sight(cfg)
    sound = build_sound(cfg)
    has_sight = _load("sight", sight)
    has_sound = _load("sound", sound)
    if has_sight:
        scorer_visual_only = bool(arch.get("scorer_visual_only", cfg.no_audio))
        audio_channels = (
            sound.backbone.tap_channels if (has_sound and not scorer_visual_only) else None
        )
        _load("scorer", StrideScorer(sight.backbone.tap_channels, audio_channels))
    if has_sight and has_sound:
        _load("gate", build_gate(cfg, sight, sound))
    return models


# ---------------------------------------------------------------------------
# per-video prediction paths


def annotation_stride(record: VideoRecord, n_frames: int, cfg: RunConfig) -> int | None:
    """Smallest stride whose clip covers two mean periods, from the
    annotation alone; None when even the maximum training stride is short."""
    return stride_mod.smallest_covering_stride(
        cfg.clip_len, record.mean_period_frames(n_frames), cfg.max_stride_train
    )


def _clip_batch(frames: np.ndarray, starts: list[int], stride: int, clip_len: int) -> Tensor:
    clips = [sample_clip(frames, s, stride, clip_len) for s in starts]
    return torch.stack([c.to_tensor() for c in clips])


def _tiling(record: VideoRecord, n_frames: int, stride: int, cfg: RunConfig) -> tuple[list[int], float]:
    """Clip start frames covering the annotated segment at one stride, and
    the segment/covered rescaling factor for the summed counts."""
    s0, s1 = record.segment_frames(n_frames)
    span = cfg.clip_len * stride
    if cfg.aggregation == "single_clip":
        starts = [s0]
        covered = min(span, s1 - s0)
    else:
        starts = list(range(s0, s1 - span + 1, span)) or [s0]
        covered = min(len(starts) * span, s1 - s0)
    return starts, (s1 - s0) / covered


@torch.no_grad()
def predict_sight_video(
    sight: SightStream,
    record: VideoRecord,
    frames: np.ndarray,
    stride: int,
    cfg: RunConfig,
) -> tuple[float, Tensor, Tensor]:
    """Video-level sight count at one stride.

    Tiles the annotated segment with consecutive non-overlapping clips in the
    resampled timeline, sums their counts, and rescales by the uncovered
    remainder; 'single_clip' aggregation instead extrapolates from the first
    clip. Returns (count, first-clip feature, first-clip tap).
    """
    starts, scale = _tiling(record, frames.shape[0], stride, cfg)
    batch = _clip_batch(frames, starts, stride, cfg.clip_len)
    counts, _, mids, feats = sight(batch)
    total = float(counts.sum()) * scale
    return total, feats[0], mids[0]


class SightVideoPredictor:
    """Batched anchored-clip predictor over a fixed set of videos.

    Clip tensors are fixed given (record, stride), so they are built once and
    re-forwarded each epoch; per-video results match predict_sight_video.
    """

    def __init__(self, records: list[VideoRecord], strides: dict[str, int], store, cfg: RunConfig):
        self.cfg = cfg
        self.video_ids: list[str] = []
        self.scales: list[float] = []
        self.slices: list[tuple[int, int]] = []
        clips: list[Tensor] = []
        for record in records:
            stride = strides.get(record.video_id)
            if stride is None:
                continue
            frames = store.frames(record)
            starts, scale = _tiling(record, frames.shape[0], stride, cfg)
            lo = len(clips)
            clips.extend(
                sample_clip(frames, s, stride, cfg.clip_len).to_tensor() for s in starts
            )
            self.video_ids.append(record.video_id)
            self.scales.append(scale)
            self.slices.append((lo, len(clips)))
        self.clips = torch.stack(clips) if clips else torch.empty(0)

    @torch.no_grad()
    def predict(self, sight: SightStream, batch_size: int = 16) -> dict[str, float]:
        if not self.video_ids:
            return {}
        counts = torch.cat([sight(chunk)[0] for chunk in self.clips.split(batch_size)])
        return {
            vid: float(counts[lo:hi].sum()) * scale
            for vid, scale, (lo, hi) in zip(self.video_ids, self.scales, self.slices)
        }


class SoundVideoPredictor:
    """Batched fixed-segment predictor; mirrors predict_sound_video."""

    def __init__(self, records: list[VideoRecord], store, cfg: RunConfig):
        self.video_ids = []
        segments = []
        for record in records:
            waveform = store.audio(record)
            if waveform is None:
                continue
            segs = _audio_segments(waveform, cfg, cfg.sound_segments_infer)
            self.video_ids.append(record.video_id)
            segments.append(
                torch.stack(
                    [torch.from_numpy(s.magnitudes.astype(np.float32)).unsqueeze(0) for s in segs]
                )
            )
        self.n_segments = segments[0].shape[0] if segments else 0
        self.segments = torch.cat(segments) if segments else torch.empty(0)

    @torch.no_grad()
    def predict(self, sound: SoundStream, batch_size: int = 8) -> dict[str, float]:
        if not self.video_ids:
            return {}
        counts = torch.cat([sound(chunk)[0] for chunk in self.segments.split(batch_size)])
        counts = counts.reshape(len(self.video_ids), self.n_segments).sum(dim=1)
        return {vid: float(counts[i]) for i, vid in enumerate(self.video_ids)}


def _audio_segments(
    waveform: AudioWaveform, cfg: RunConfig, n_segments: int, span_s: tuple[float, float] | None = None
) -> list[Spectrogram]:
    spec_cfg = spectrogram_config(cfg)
    x = waveform.samples
    if span_s is not None:
        sr = waveform.sample_rate
        lo = max(0, int(span_s[0] * sr))
        hi = min(x.size, max(lo + spec_cfg.fft_size, int(span_s[1] * sr)))
        x = x[lo:hi]
        if x.size < spec_cfg.fft_size:  # clip span fell off the end of the track
            x = waveform.samples[-spec_cfg.fft_size :]
    spec = stft_spectrogram(AudioWaveform(x, waveform.sample_rate), spec_cfg)
    return segment_and_resize(spec, n_segments)


@torch.no_grad()
def predict_sound_video(
    sound: SoundStream,
    record: VideoRecord,
    waveform: AudioWaveform,
    cfg: RunConfig,
    n_segments: int | None = None,
) -> tuple[float, Tensor]:
    """Video-level sound count; returns (count, first-segment tap)."""
    segments = _audio_segments(waveform, cfg, n_segments or cfg.sound_segments_infer)
    pred, _, mid = sound.count_segments(segments)
    return pred.value, mid


@torch.no_grad()
def _candidate_taps(
    sight: SightStream,
    sound: SoundStream | None,
    record: VideoRecord,
    frames: np.ndarray,
    waveform: AudioWaveform | None,
    strides: list[int],
    cfg: RunConfig,
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Mid-level taps (and sight features) for segment-anchored candidate
    clips, one per stride; the audio tap for a stride comes from the audio
    cropped to that clip's source span."""
    s0, _ = record.segment_frames(frames.shape[0])
    batch = torch.stack(
        [sample_clip(frames, s0, s, cfg.clip_len).to_tensor() for s in strides]
    )
    _, _, vis_mids, vis_feats = sight(batch)
    aud_mids = None
    if sound is not None and waveform is not None:
        segs = []
        for s in strides:
            span = (s0 + (cfg.clip_len - 1) * s) / record.fps
            segs.append(_audio_segments(waveform, cfg, 1, span_s=(s0 / record.fps, span))[0])
        aud_batch = torch.stack(
            [torch.from_numpy(seg.magnitudes.astype(np.float32)).unsqueeze(0) for seg in segs]
        )
        _, aud_mids = sound.backbone(aud_batch)
    return vis_mids, aud_mids, vis_feats


@dataclass
class InferenceResult:
    fused: CountPrediction
    sight: CountPrediction | None
    sound: CountPrediction | None
    gamma: float
    stride: int
    stride_scores: dict[int, float]


@torch.no_grad()
def infer_video(
    record: VideoRecord,
    frames: np.ndarray,
    waveform: AudioWaveform | None,
    models: ModelBundle,
    cfg: RunConfig,
) -> InferenceResult:
    """Full inference for one video: pick the stride with the highest score,
    count with both streams, and fuse under the reliability gate."""
    models.require("sight")
    use_audio = waveform is not None and models.sound is not None and not cfg.no_audio

    stride_scores: dict[int, float] = {}
    if cfg.fixed_stride is not None:
        chosen = cfg.fixed_stride
    else:
        models.require("scorer")
        strides = list(range(1, cfg.max_stride_infer + 1))
        vis_mids, aud_mids, _ = _candidate_taps(
            models.sight,
            models.sound if use_audio else None,
            record,
            frames,
            waveform if use_audio else None,
            strides,
            cfg,
        )
        if models.scorer.audio_enabled and aud_mids is None:
            # absent track: score against the silent-audio limit
            if models.sound is None:
                raise DependencyError("audio-enabled stride scorer needs the sound stream")
            spec_cfg = spectrogram_config(cfg)
            silent = torch.zeros(len(strides), 1, spec_cfg.freq_bins, spec_cfg.segment_frames)
            _, aud_mids = models.sound.backbone(silent)
        scores = models.scorer(vis_mids, aud_mids if models.scorer.audio_enabled else None)
        stride_scores = {s: float(scores[i]) for i, s in enumerate(strides)}
        chosen, _ = select_stride(stride_scores)

    sight_count, vis_feat, _ = predict_sight_video(models.sight, record, frames, chosen, cfg)
    sight_pred = CountPrediction(value=sight_count, modality=Modality.SIGHT)

    sound_pred = None
    gamma = 0.0
    if use_audio:
        sound_count, aud_tap = predict_sound_video(models.sound, record, waveform, cfg)
        sound_pred = CountPrediction(value=sound_count, modality=Modality.SOUND)
        if cfg.gamma_override is not None:
            gamma = cfg.gamma_override
        else:
            models.require("gate")
            gamma = float(models.gate(vis_feat.unsqueeze(0), aud_tap.unsqueeze(0))[0])
        fused = fuse(sight_pred, sound_pred, gamma)
    else:
        fused = CountPrediction(value=sight_pred.value, modality=Modality.FUSED)

    return InferenceResult(
        fused=fused,
        sight=sight_pred,
        sound=sound_pred,
        gamma=gamma,
        stride=chosen,
        stride_scores=stride_scores,
    )


# ---------------------------------------------------------------------------
# training stages


def _resolve_dataset(cfg: RunConfig, manifest: DatasetManifest | None, store):
    if manifest is not None:
        if store is None:
            raise ConfigError("an explicit manifest needs an explicit media store")
        return manifest, store
    if cfg.dataset is None:
        raise ConfigError("no dataset configured")
    path = Path(cfg.dataset)
    return load_manifest(path), CachingMediaStore(FileMediaStore(path.parent))


def _sgd(params, stage) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=stage.learning_rate, momentum=stage.momentum)


def _val_relative_mae(preds: dict[str, float], manifest: DatasetManifest) -> float:
    pairs = [(p, manifest.get(v).count.value) for v, p in preds.items()]
    if not pairs:
        return float("inf")
    return mae([p for p, _ in pairs], [l for _, l in pairs])


def _merge_empirical(weights_dir: Path, stream: str, events: list[EpochRecording], cfg: RunConfig):
    thresholds = {"sight": cfg.theta_r_v, "sound": cfg.theta_r_a}
    new = collect_empirical_predictions(events, thresholds)
    path = weights_dir / EMPIRICAL_TABLE
    table = EmpiricalPredictionTable.load(path) if path.exists() else EmpiricalPredictionTable()
    table.merge_stream(stream, new)
    table.save(path)
    return path


def _action_vocab(cfg: RunConfig, records: list[VideoRecord], num_classes: int) -> dict[str, int] | None:
    """Action-class index map for the cross-entropy supervision variant."""
    if Supervision(cfg.supervision) is not Supervision.ACTION_CLASS_CE:
        return None
    missing = [r.video_id for r in records if r.action_class is None]
    if missing:
        raise ConfigError(
            f"action-class supervision needs action_class on every training record; "
            f"missing on {missing[:3]}"
        )
    classes = sorted({r.action_class for r in records})
    if len(classes) > num_classes:
        raise ConfigError(
            f"{len(classes)} action classes exceed the {num_classes} repetition classes"
        )
    return {c: i for i, c in enumerate(classes)}


def _train_sight(cfg: RunConfig, manifest: DatasetManifest, store, record_out: RunRecord):
    rng = seed_everything(cfg.seed, cfg.deterministic)
    stage = cfg.sight_train
    model = build_sight(cfg)
    optimizer = _sgd(model.parameters(), stage)
    train = manifest.split("train")
    val = manifest.split("val")
    vocab = _action_vocab(cfg, train, cfg.p_sight)

    usable: list[tuple[VideoRecord, int]] = []
    for r in train:
        s = annotation_stride(r, store.frames(r).shape[0], cfg)
        if s is None:
            log.warning("video %s: no usable training stride; skipped", r.video_id)
            continue
        usable.append((r, s))
    if not usable:
        raise ConfigError("no training video admits a covering stride at this clip length")

    def anchored_predictor(records):
        strides = {
            r.video_id: s
            for r in records
            if (s := annotation_stride(r, store.frames(r).shape[0], cfg)) is not None
        }
        return SightVideoPredictor(records, strides, store, cfg)

    val_predictor = anchored_predictor(val)
    train_predictor = anchored_predictor(train)
    events: list[EpochRecording] = []
    models = ModelBundle(sight=model)
    for epoch in range(stage.epochs):
        model.train()
        order = rng.permutation(len(usable))
        losses = []
        for batch_idx in _batches(list(order), stage.batch_size):
            batch_clips = []
            batch_labels = []
            batch_actions = []
            for i in batch_idx:
                r, s = usable[i]
                clip, label = clip_sampler(r, store.frames(r), s, cfg.clip_len, offset_rng=rng)
                batch_clips.append(clip.to_tensor())
                batch_labels.append(label)
                if vocab is not None:
                    batch_actions.append(vocab[r.action_class])
            x = torch.stack(batch_clips)
            y = torch.tensor(batch_labels, dtype=torch.float32)
            _, out, _, _ = model(x)
            loss = counting_loss(
                out.count, y, out.class_dist, model.head.config,
                action_labels=batch_actions if vocab is not None else None,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        record_out.epoch_losses.append(float(np.mean(losses)))

        model.eval()
        val_preds = val_predictor.predict(model)
        val_mae = _val_relative_mae(val_preds, manifest)
        record_out.val_relative_mae.append(val_mae)
        train_preds = train_predictor.predict(model)
        events.append(EpochRecording("sight", val_mae, train_preds))
        log.info("sight epoch %d: loss %.4f val MAE %.4f", epoch, record_out.epoch_losses[-1], val_mae)

    weights_dir = Path(cfg.weights_dir)
    save_models(models, weights_dir, cfg)
    record_out.artifacts["sight_weights"] = str(weights_dir / WEIGHT_FILES["sight"])
    record_out.artifacts["empirical_table"] = str(_merge_empirical(weights_dir, "sight", events, cfg))


def _sound_training_segments(
    record: VideoRecord, waveform: AudioWaveform, cfg: RunConfig
) -> list[tuple[Tensor, float]]:
    """Segment the track so each fixed-width segment holds at least two
    repetitions (n = count // 2, capped); labels split the count evenly."""
    n = int(max(1, min(record.count.value // 2, cfg.sound_segments_train_cap)))
    segments = _audio_segments(waveform, cfg, n)
    label = record.count.value / n
    return [
        (torch.from_numpy(s.magnitudes.astype(np.float32)).unsqueeze(0), label) for s in segments
    ]


def _train_sound(cfg: RunConfig, manifest: DatasetManifest, store, record_out: RunRecord):
    rng = seed_everything(cfg.seed, cfg.deterministic)
    stage = cfg.sound_train
    model = build_sound(cfg)
    optimizer = _sgd(model.parameters(), stage)
    train = manifest.split("train")
    val = manifest.split("val")
    vocab = _action_vocab(cfg, train, cfg.p_sound)

    samples: list[tuple[Tensor, float, int | None]] = []
    for r in train:
        waveform = store.audio(r)
        if waveform is None:
            log.warning("video %s has no audio; skipped for sound training", r.video_id)
            continue
        action = vocab[r.action_class] if vocab is not None else None
        samples.extend((x, y, action) for x, y in _sound_training_segments(r, waveform, cfg))
    if not samples:
        raise ConfigError("no training video has a usable audio track")

    val_predictor = SoundVideoPredictor(val, store, cfg)
    train_predictor = SoundVideoPredictor(train, store, cfg)
    events: list[EpochRecording] = []
    models = ModelBundle(sound=model)
    for epoch in range(stage.epochs):
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for batch_idx in _batches(list(order), stage.batch_size):
            x = torch.stack([samples[i][0] for i in batch_idx])
            y = torch.tensor([samples[i][1] for i in batch_idx], dtype=torch.float32)
            _, out, _, _ = model(x)
            loss = counting_loss(
                out.count, y, out.class_dist, model.head.config,
                action_labels=[samples[i][2] for i in batch_idx] if vocab is not None else None,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        record_out.epoch_losses.append(float(np.mean(losses)))

        model.eval()
        val_preds = val_predictor.predict(model)
        val_mae = _val_relative_mae(val_preds, manifest)
        record_out.val_relative_mae.append(val_mae)
        train_preds = train_predictor.predict(model)
        events.append(EpochRecording("sound", val_mae, train_preds))
        log.info("sound epoch %d: loss %.4f val MAE %.4f", epoch, record_out.epoch_losses[-1], val_mae)

    weights_dir = Path(cfg.weights_dir)
    save_models(models, weights_dir, cfg)
    record_out.artifacts["sound_weights"] = str(weights_dir / WEIGHT_FILES["sound"])
    record_out.artifacts["empirical_table"] = str(_merge_empirical(weights_dir, "sound", events, cfg))


def mine_manifest_strides(
    cfg: RunConfig,
    manifest: DatasetManifest,
    store,
    models: ModelBundle,
) -> dict[str, stride_mod.StrideMiningResult | None]:
    """Run the trained sight stream over every candidate stride per training
    video and classify strides into positive/negative sets."""
    models.require("sight")
    scfg = stride_config(cfg)
    results: dict[str, stride_mod.StrideMiningResult | None] = {}
    for record in manifest.split("train"):
        frames = store.frames(record)
        s0, _ = record.segment_frames(frames.shape[0])
        strides = list(range(1, cfg.max_stride_train + 1))
        with torch.no_grad():
            batch = torch.stack(
                [sample_clip(frames, s0, s, cfg.clip_len).to_tensor() for s in strides]
            )
            counts, _, _, _ = models.sight(batch)
        per_stride = {s: float(counts[i]) for i, s in enumerate(strides)}
        results[record.video_id] = stride_mod.mine_strides(
            record.video_id,
            per_stride,
            cfg.clip_len,
            record.mean_period_frames(frames.shape[0]),
            scfg,
        )
    return results


def _train_stride(cfg: RunConfig, manifest: DatasetManifest, store, record_out: RunRecord):
    rng = seed_everything(cfg.seed, cfg.deterministic)
    weights_dir = Path(cfg.weights_dir)
    if not (weights_dir / WEIGHT_FILES["sight"]).exists():
        raise DependencyError(f"train_stride needs sight weights at {weights_dir / WEIGHT_FILES['sight']}")
    if not cfg.no_audio and not (weights_dir / WEIGHT_FILES["sound"]).exists():
        raise DependencyError(
            f"train_stride with audio needs sound weights at {weights_dir / WEIGHT_FILES['sound']}"
        )
    cfg = arch_config(cfg, weights_dir)
    models = load_models(cfg, weights_dir)
    stage = cfg.stride_train
    scfg = stride_config(cfg)

    sidecar = weights_dir / MINING_SIDECAR
    if sidecar.exists():
        mining = stride_mod.load_mining_sidecar(sidecar)
        log.info("loaded %d mining records from %s", len(mining), sidecar)
    else:
        mining = mine_manifest_strides(cfg, manifest, store, models)
        stride_mod.save_mining_sidecar(sidecar, mining)
    record_out.artifacts["mining_sidecar"] = str(sidecar)

    scorer = build_scorer(cfg, models.sight, models.sound)
    optimizer = _sgd(scorer.parameters(), stage)

    # frozen-backbone taps per (video, stride), shared across epochs
    usable = [
        (manifest.get(vid), m)
        for vid, m in mining.items()
        if m is not None and m.negative_strides
    ]
    if not usable:
        raise ConfigError("stride mining produced no usable (positive, negative) pairs")
    tap_cache: dict[str, tuple[Tensor, Tensor | None]] = {}

    def taps_for(record: VideoRecord, strides: list[int]):
        frames = store.frames(record)
        waveform = store.audio(record) if not cfg.no_audio else None
        vis, aud, _ = _candidate_taps(
            models.sight, models.sound if not cfg.no_audio else None, record, frames, waveform, strides, cfg
        )
        return vis, aud

    all_strides = list(range(1, cfg.max_stride_train + 1))
    for record, _ in usable:
        tap_cache[record.video_id] = taps_for(record, all_strides)

    for epoch in range(stage.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for batch_idx in _batches(list(order), stage.batch_size):
            pos_v, pos_a, neg_v, neg_a = [], [], [], []
            for i in batch_idx:
                record, mined = usable[i]
                vis, aud = tap_cache[record.video_id]
                neg_stride = int(rng.choice(mined.negative_strides))
                pos_v.append(vis[mined.positive_stride - 1])
                neg_v.append(vis[neg_stride - 1])
                if aud is not None:
                    pos_a.append(aud[mined.positive_stride - 1])
                    neg_a.append(aud[neg_stride - 1])
            pos_scores = scorer(torch.stack(pos_v), torch.stack(pos_a) if pos_a else None)
            neg_scores = scorer(torch.stack(neg_v), torch.stack(neg_a) if neg_a else None)
            loss = ranking_loss(neg_scores, pos_scores, scfg.margin)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        record_out.epoch_losses.append(float(np.mean(losses)))
        log.info("stride epoch %d: ranking loss %.4f", epoch, record_out.epoch_losses[-1])

    models.scorer = scorer
    save_models(ModelBundle(scorer=scorer), weights_dir, cfg)
    record_out.artifacts["scorer_weights"] = str(weights_dir / WEIGHT_FILES["scorer"])


def _train_reliability(cfg: RunConfig, manifest: DatasetManifest, store, record_out: RunRecord):
    rng = seed_everything(cfg.seed, cfg.deterministic)
    weights_dir = Path(cfg.weights_dir)
    for name in ("sight", "sound"):
        if not (weights_dir / WEIGHT_FILES[name]).exists():
            raise DependencyError(
                f"train_reliability needs {name} weights at {weights_dir / WEIGHT_FILES[name]}"
            )
    table_path = weights_dir / EMPIRICAL_TABLE
    if not table_path.exists():
        raise DependencyError(f"train_reliability needs the empirical table at {table_path}")
    table = EmpiricalPredictionTable.load(table_path)
    record_out.artifacts["empirical_table"] = str(table_path)

    cfg = arch_config(cfg, weights_dir)
    models = load_models(cfg, weights_dir)
    stage = cfg.reliability_train
    gate = build_gate(cfg, models.sight, models.sound)
    optimizer = _sgd(gate.parameters(), stage)

    feats, taps, sight_emp, sound_emp, labels = [], [], [], [], []
    for record in manifest.split("train"):
        entry = table.get(record.video_id)
        if entry is None or entry.sight_pred is None or entry.sound_pred is None:
            continue
        frames = store.frames(record)
        waveform = store.audio(record)
        if waveform is None:
            continue
        chosen = _inference_stride(record, frames, waveform, models, cfg)
        with torch.no_grad():
            _, feat, _ = predict_sight_video(models.sight, record, frames, chosen, cfg)
            _, tap = predict_sound_video(models.sound, record, waveform, cfg)
        feats.append(feat)
        taps.append(tap)
        sight_emp.append(entry.sight_pred)
        sound_emp.append(entry.sound_pred)
        labels.append(record.count.value)
    if not feats:
        raise ConfigError("empirical table covers no training video with audio")

    feats_t = torch.stack(feats)
    taps_t = torch.stack(taps)
    sight_t = torch.tensor(sight_emp, dtype=torch.float32)
    sound_t = torch.tensor(sound_emp, dtype=torch.float32)
    labels_t = torch.tensor(labels, dtype=torch.float32)

    for epoch in range(stage.epochs):
        order = rng.permutation(len(feats))
        losses = []
        for batch_idx in _batches(list(order), stage.batch_size):
            idx = torch.as_tensor(batch_idx)
            gamma = gate(feats_t[idx], taps_t[idx])
            fused = sight_t[idx] * (1.0 - gamma) + sound_t[idx] * gamma
            loss = reliability_loss(fused, labels_t[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        record_out.epoch_losses.append(float(np.mean(losses)))
        log.info("reliability epoch %d: loss %.4f", epoch, record_out.epoch_losses[-1])

    save_models(ModelBundle(gate=gate), weights_dir, cfg)
    record_out.artifacts["gate_weights"] = str(weights_dir / WEIGHT_FILES["gate"])


def _inference_stride(record, frames, waveform, models: ModelBundle, cfg: RunConfig) -> int:
    """Stride the full inference path would pick; falls back to the
    annotation-derived stride when no scorer has been trained yet."""
    if cfg.fixed_stride is not None:
        return cfg.fixed_stride
    if models.scorer is not None:
        strides = list(range(1, cfg.max_stride_infer + 1))
        use_audio = models.scorer.audio_enabled and waveform is not None
        with torch.no_grad():
            vis, aud, _ = _candidate_taps(
                models.sight, models.sound if use_audio else None, record, frames,
                waveform if use_audio else None, strides, cfg,
            )
            scores = models.scorer(vis, aud if models.scorer.audio_enabled else None)
        chosen, _ = select_stride({s: float(scores[i]) for i, s in enumerate(strides)})
        return chosen
    return annotation_stride(record, frames.shape[0], cfg) or 1


def train_stage(
    cfg: RunConfig,
    manifest: DatasetManifest | None = None,
    store=None,
) -> RunRecord:
    """Run one training stage and persist its artifacts and RunRecord."""
    manifest, store = _resolve_dataset(cfg, manifest, store)
    record = RunRecord(stage=cfg.stage, config=cfg.to_dict())
    stage_fn = {
        "train_sight": _train_sight,
        "train_sound": _train_sound,
        "train_stride": _train_stride,
        "train_reliability": _train_reliability,
    }.get(cfg.stage)
    if stage_fn is None:
        raise ConfigError(f"{cfg.stage!r} is not a training stage")
    stage_fn(cfg, manifest, store, record)
    run_dir = Path(cfg.run_dir or cfg.weights_dir)
    record_path = run_dir / f"run_record_{cfg.stage}.json"
    record.save(record_path)
    return record


# ---------------------------------------------------------------------------
# evaluation


def evaluate_manifest(
    cfg: RunConfig,
    manifest: DatasetManifest | None = None,
    store=None,
    models: ModelBundle | None = None,
    split: str = "test",
    out_dir: str | Path | None = None,
) -> tuple[EvalReport, list[dict]]:
    """Run inference over one split and compute MAE/OBO (+ per-tag MAE)."""
    manifest, store = _resolve_dataset(cfg, manifest, store)
    models = models or load_models(cfg)
    models.require("sight")
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty")
    rows: list[dict] = []
    preds, gts, tags = [], [], []
    for record in records:
        frames = store.frames(record)
        waveform = store.audio(record)
        result = infer_video(record, frames, waveform, models, cfg)
        preds.append(result.fused)
        gts.append(record.count)
        tags.append(record.challenge_tags)
        rows.append(
            {
                "video_id": record.video_id,
                "fused": result.fused.value,
                "sight": result.sight.value if result.sight else None,
                "sound": result.sound.value if result.sound else None,
                "gamma": result.gamma,
                "stride": result.stride,
                "label": record.count.value,
                "tags": sorted(t.value for t in record.challenge_tags),
            }
        )
    report = evaluate_report(preds, gts, tags if manifest.has_tags() else None)
    if out_dir is not None:
        write_report(out_dir, report, rows)
    return report, rows


def write_report(out_dir: str | Path, report: EvalReport, rows: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.to_lines()) + "\n")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def report_from_predictions(path: str | Path) -> EvalReport:
    """Recompute the evaluation report from a saved predictions file."""
    preds, gts, tags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            preds.append(d["fused"])
            gts.append(d["label"])
            tags.append(d.get("tags", []))
    has_tags = any(tags)
    return evaluate_report(preds, gts, tags if has_tags else None)
