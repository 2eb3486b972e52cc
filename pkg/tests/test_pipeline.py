"""Pipeline integration: stage dependencies, inference identities,
evaluation oracles, and artifact round-trips."""

import numpy as np
import pytest
import torch

from avcount.config import RunConfig, StageParams
from avcount.errors import ConfigError, DependencyError
from avcount.metrics import best_constant_mae, mae
from avcount.pipeline import (
    ModelBundle,
    SightVideoPredictor,
    SoundVideoPredictor,
    annotation_stride,
    build_sight,
    build_sound,
    evaluate_manifest,
    infer_video,
    load_models,
    predict_sight_video,
    predict_sound_video,
    report_from_predictions,
    save_models,
    train_stage,
)
from avcount.synthetic import SyntheticDatasetConfig, build_synthetic_dataset
from avcount.datasets import ChallengeTag


def micro_base(weights_dir, **extra):
    base = dict(
        weights_dir=str(weights_dir),
        seed=0,
        sight_feature_dim=16,
        clip_len=16,
        resolution=16,
        sound_feature_dim=16,
        p_sight=3,
        p_sound=3,
        lambda2=1.0,
        sound_segments_train_cap=1,
        sight_train=StageParams(2, 1e-3),
        sound_train=StageParams(2, 1e-2),
        stride_train=StageParams(2, 1e-2),
        reliability_train=StageParams(2, 5e-2),
    )
    base.update(extra)
    return base


@pytest.fixture(scope="module")
def micro_dataset():
    cfg = SyntheticDatasetConfig(
        n_train=10,
        n_val=4,
        n_test=4,
        seed=3,
        resolution=16,
        count_range=(3, 5),
        period_range_s=(0.8, 1.2),
        noise_level=0.1,
        degraded_fraction=0.3,
        degradations=(ChallengeTag.DISAPPEARING_ACTIVITY,),
    )
    return build_synthetic_dataset(cfg)


@pytest.fixture(scope="module")
def trained_micro(micro_dataset, tmp_path_factory):
    manifest, store = micro_dataset
    weights = tmp_path_factory.mktemp("micro_weights")
    records = {}
    for stage in ("train_sight", "train_sound", "train_stride", "train_reliability"):
        cfg = RunConfig(stage=stage, **micro_base(weights))
        records[stage] = train_stage(cfg, manifest, store)
    return manifest, store, weights, records


class TestStageDependencies:
    def test_stride_without_sight_weights(self, micro_dataset, tmp_path):
        manifest, store = micro_dataset
        cfg = RunConfig(stage="train_stride", **micro_base(tmp_path / "empty"))
        with pytest.raises(DependencyError, match="sight"):
            train_stage(cfg, manifest, store)

    def test_reliability_without_streams(self, micro_dataset, tmp_path):
        manifest, store = micro_dataset
        cfg = RunConfig(stage="train_reliability", **micro_base(tmp_path / "empty"))
        with pytest.raises(DependencyError):
            train_stage(cfg, manifest, store)

    def test_missing_dataset_is_config_error(self, tmp_path):
        cfg = RunConfig(stage="train_sight", **micro_base(tmp_path))
        with pytest.raises(ConfigError):
            train_stage(cfg)

    def test_infer_without_gate(self, micro_dataset, tmp_path):
        manifest, store = micro_dataset
        cfg = RunConfig(stage="infer", fixed_stride=2, **micro_base(tmp_path / "w2"))
        sight = build_sight(cfg)
        sound = build_sound(cfg)
        models = ModelBundle(sight=sight, sound=sound)
        r = manifest.split("test")[0]
        with pytest.raises(DependencyError, match="gate"):
            infer_video(r, store.frames(r), store.audio(r), models, cfg)


class TestTraining:
    def test_sight_descends_and_writes_artifacts(self, trained_micro):
        _, _, weights, records = trained_micro
        rec = records["train_sight"]
        assert rec.epoch_losses[-1] < rec.epoch_losses[0]
        assert (weights / "sight.pt").exists()
        assert (weights / "empirical_predictions.jsonl").exists()
        assert len(rec.val_relative_mae) == len(rec.epoch_losses)

    def test_stride_writes_sidecar_and_scorer(self, trained_micro):
        _, _, weights, records = trained_micro
        assert (weights / "stride_mining.jsonl").exists()
        assert (weights / "stride_scorer.pt").exists()

    def test_run_records_saved(self, trained_micro):
        _, _, weights, records = trained_micro
        for stage in records:
            assert (weights / f"run_record_{stage}.json").exists()

    def test_mining_sidecar_reused_on_retrain(self, trained_micro, micro_dataset):
        manifest, store = micro_dataset
        _, _, weights, _ = trained_micro
        sidecar = weights / "stride_mining.jsonl"
        before = sidecar.read_text()
        cfg = RunConfig(stage="train_stride", **micro_base(weights))
        train_stage(cfg, manifest, store)  # restart: loads, does not re-mine
        assert sidecar.read_text() == before


class TestInference:
    def test_gamma_zero_override_equals_sight(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", gamma_override=0.0, **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[0]
        res = infer_video(r, store.frames(r), store.audio(r), models, cfg)
        assert res.fused.value == pytest.approx(res.sight.value, abs=1e-12)

    def test_gamma_half_is_averaging_baseline(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", gamma_override=0.5, **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[1]
        res = infer_video(r, store.frames(r), store.audio(r), models, cfg)
        assert res.fused.value == pytest.approx(
            0.5 * (res.sight.value + res.sound.value), abs=1e-9
        )

    def test_fixed_stride_bypasses_scoring(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", fixed_stride=3, **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[0]
        res = infer_video(r, store.frames(r), store.audio(r), models, cfg)
        assert res.stride == 3
        assert res.stride_scores == {}

    def test_no_audio_falls_back_to_sight(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", no_audio=True, fixed_stride=2, **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[0]
        res = infer_video(r, store.frames(r), store.audio(r), models, cfg)
        assert res.gamma == 0.0
        assert res.sound is None
        assert res.fused.value == res.sight.value

    def test_absent_track_uses_silent_audio_scoring(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[0]
        res = infer_video(r, store.frames(r), None, models, cfg)
        assert res.gamma == 0.0
        assert res.sound is None
        assert 1 <= res.stride <= cfg.max_stride_infer

    def test_selected_stride_scores_reported(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="infer", **micro_base(weights))
        models = load_models(cfg)
        r = manifest.split("test")[2]
        res = infer_video(r, store.frames(r), store.audio(r), models, cfg)
        assert set(res.stride_scores) == set(range(1, cfg.max_stride_infer + 1))
        best = max(res.stride_scores.values())
        assert res.stride_scores[res.stride] == best


class TestPredictionPaths:
    def test_batched_sight_predictor_matches_single_path(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="evaluate", **micro_base(weights))
        models = load_models(cfg)
        records = manifest.split("val")
        strides = {
            r.video_id: annotation_stride(r, store.frames(r).shape[0], cfg) for r in records
        }
        strides = {k: v for k, v in strides.items() if v is not None}
        batched = SightVideoPredictor(records, strides, store, cfg).predict(models.sight)
        for r in records:
            if r.video_id not in strides:
                continue
            single, _, _ = predict_sight_video(
                models.sight, r, store.frames(r), strides[r.video_id], cfg
            )
            assert batched[r.video_id] == pytest.approx(single, rel=1e-5)

    def test_batched_sound_predictor_matches_single_path(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="evaluate", **micro_base(weights))
        models = load_models(cfg)
        records = manifest.split("val")
        batched = SoundVideoPredictor(records, store, cfg).predict(models.sound)
        for r in records:
            single, _ = predict_sound_video(models.sound, r, store.audio(r), cfg)
            assert batched[r.video_id] == pytest.approx(single, rel=1e-5)


class TestEvaluate:
    def _constant_model_config(self, weights_dir, constant):
        cfg = RunConfig(
            stage="evaluate",
            no_audio=True,
            fixed_stride=16,
            aggregation="single_clip",
            **micro_base(weights_dir),
        )
        sight = build_sight(cfg)
        with torch.no_grad():
            for p in sight.parameters():
                p.zero_()
            sight.head.count_fc.bias.fill_(constant)
        save_models(ModelBundle(sight=sight), weights_dir, cfg)
        return cfg

    def test_constant_predictor_matches_closed_form(self, micro_dataset, tmp_path):
        manifest, store = micro_dataset
        labels = [r.count.value for r in manifest.split("test")]
        constant, oracle = best_constant_mae(labels)
        cfg = self._constant_model_config(tmp_path / "const", constant)
        report, rows = evaluate_manifest(cfg, manifest, store, split="test")
        assert report.mae == pytest.approx(oracle, abs=1e-9)

    def test_report_serialization_fidelity(self, trained_micro, tmp_path):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="evaluate", **micro_base(weights))
        models = load_models(cfg)
        out = tmp_path / "eval"
        report, rows = evaluate_manifest(
            cfg, manifest, store, models=models, split="test", out_dir=out
        )
        reloaded = report_from_predictions(out / "predictions.jsonl")
        assert reloaded.mae == pytest.approx(report.mae, abs=1e-12)
        assert reloaded.obo == pytest.approx(report.obo, abs=1e-12)
        assert reloaded.per_tag_mae == pytest.approx(report.per_tag_mae)
        assert (out / "report.txt").read_text().splitlines() == report.to_lines()

    def test_tagged_split_reports_per_tag_mae(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="evaluate", **micro_base(weights))
        report, _ = evaluate_manifest(cfg, manifest, store, split="train")
        tagged = [r for r in manifest.split("train") if r.challenge_tags]
        if tagged:  # dataset seeded to include degraded videos
            assert ChallengeTag.DISAPPEARING_ACTIVITY.value in report.per_tag_mae

    def test_empty_split_rejected(self, trained_micro):
        manifest, store, weights, _ = trained_micro
        cfg = RunConfig(stage="evaluate", **micro_base(weights))
        records = [r for r in manifest if r.split != "test"]
        from avcount.datasets import DatasetManifest

        with pytest.raises(ConfigError):
            evaluate_manifest(cfg, DatasetManifest(records), store, split="test")

    def test_fixed_stride_sweep_emits_one_mae_per_stride(self, trained_micro):
        """Fixed-stride baseline protocol: one MAE per stride 1..6."""
        manifest, store, weights, _ = trained_micro
        table = {}
        for stride in range(1, 7):
            cfg = RunConfig(
                stage="evaluate", fixed_stride=stride, no_audio=True, **micro_base(weights)
            )
            report, _ = evaluate_manifest(cfg, manifest, store, split="val")
            table[stride] = report.mae
        assert sorted(table) == [1, 2, 3, 4, 5, 6]
        assert all(np.isfinite(v) for v in table.values())


class TestActionClassSupervision:
    def test_streams_train_with_action_labels(self, micro_dataset, tmp_path):
        manifest, store = micro_dataset
        base = micro_base(
            tmp_path / "ce_weights", supervision="action_class_ce", p_sight=4, p_sound=4
        )
        for stage in ("train_sight", "train_sound"):
            cfg = RunConfig(stage=stage, **base)
            rec = train_stage(cfg, manifest, store)
            assert rec.epoch_losses[-1] < rec.epoch_losses[0]

    def test_missing_action_class_rejected(self, tmp_path):
        from avcount.datasets import DatasetManifest, InMemoryMediaStore, VideoRecord
        from avcount.metrics import CountLabel

        frames = np.zeros((60, 16, 16, 3), dtype=np.uint8)
        record = VideoRecord(
            video_id="v", media_path="memory://v", count=CountLabel(3.0),
            segment=(0.0, 2.4), split="train",
        )
        store = InMemoryMediaStore()
        store.add("v", frames)
        cfg = RunConfig(
            stage="train_sight",
            **micro_base(tmp_path / "ce2", supervision="action_class_ce"),
        )
        with pytest.raises(ConfigError, match="action_class"):
            train_stage(cfg, DatasetManifest([record]), store)
