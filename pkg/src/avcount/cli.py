"""Command-line surface.

Verbs: synth (generate a synthetic dataset), train (one stage), infer (one
video), evaluate (a manifest split), report (recompute metrics from saved
predictions). Exit codes: 0 success, 2 config error, 3 dependency error,
4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .datasets import FileMediaStore, VideoRecord, load_manifest
from .errors import ConfigError, DataError, DependencyError
from .metrics import CountLabel
from .pipeline import (
    evaluate_manifest,
    infer_video,
    load_models,
    report_from_predictions,
    train_stage,
)
from .sound import AudioWaveform
from .synthetic import SyntheticDatasetConfig, materialize_synthetic_dataset

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DATA = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dataset", help="manifest path")
    p.add_argument("--weights-dir", dest="weights_dir")
    p.add_argument("--fixed-stride", dest="fixed_stride", type=int, default=None,
                   help="bypass the stride scorer and use this stride everywhere")
    p.add_argument("--no-audio", dest="no_audio", action="store_const", const=True, default=None,
                   help="sight-only mode: drop the sound stream and fusion")
    p.add_argument("--gamma-override", dest="gamma_override", type=float, default=None,
                   help="force the fusion weight (0.5 reproduces prediction averaging)")


def _build_config(args: argparse.Namespace, stage: str) -> RunConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("seed", "dataset", "weights_dir", "fixed_stride", "no_audio", "gamma_override")
    }
    overrides["stage"] = stage
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    cfg = RunConfig(stage=stage)
    return cfg.with_overrides(**{k: v for k, v in overrides.items() if k != "stage"})


def _cmd_synth(args) -> int:
    cfg = SyntheticDatasetConfig(
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        seed=args.seed or 0,
        resolution=args.resolution,
        degraded_fraction=args.degraded_fraction,
    )
    manifest_path = materialize_synthetic_dataset(cfg, args.out)
    manifest = load_manifest(manifest_path)
    print(f"wrote {len(manifest)} videos to {manifest_path}")
    for split, n in manifest.split_counts().items():
        print(f"  {split:<6} {n}")
    return 0


def _cmd_train(args) -> int:
    stage = f"train_{args.stage}"
    cfg = _build_config(args, stage)
    record = train_stage(cfg)
    final = record.epoch_losses[-1] if record.epoch_losses else float("nan")
    print(f"{stage}: {len(record.epoch_losses)} epochs, final loss {final:.4f}")
    for name, path in record.artifacts.items():
        print(f"  {name}: {path}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _build_config(args, "infer")
    models = load_models(cfg)
    store = FileMediaStore()
    probe = VideoRecord(
        video_id=Path(args.video).stem,
        media_path=args.video,
        count=CountLabel(1.0),  # placeholder; inference ignores the label
        segment=(0.0, 1.0),
        fps=args.fps,
    )
    frames = store.frames(probe)
    record = VideoRecord(
        video_id=probe.video_id,
        media_path=args.video,
        audio_path=args.audio,
        count=CountLabel(1.0),
        segment=(0.0, args.duration or frames.shape[0] / args.fps),
        fps=args.fps,
    )
    waveform = AudioWaveform.from_file(args.audio) if args.audio else None
    result = infer_video(record, frames, waveform, models, cfg)
    print(f"stride  {result.stride}")
    print(f"gamma   {result.gamma:.4f}")
    print(f"sight   {result.sight.value:.3f}")
    if result.sound is not None:
        print(f"sound   {result.sound.value:.3f}")
    print(f"fused   {result.fused.value:.3f}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _build_config(args, "evaluate")
    out_dir = args.out or (Path(cfg.weights_dir) / f"eval_{args.split}")
    report, _ = evaluate_manifest(cfg, split=args.split, out_dir=out_dir)
    print("\n".join(report.to_lines()))
    print(f"report written to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    report = report_from_predictions(args.predictions)
    print("\n".join(report.to_lines()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avcount", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=24)
    p.add_argument("--degraded-fraction", type=float, default=0.0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("sight", "sound", "stride", "reliability"))
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="count repetitions in one video")
    p.add_argument("--video", required=True, help="frame directory or .npy frame array")
    p.add_argument("--audio", help="PCM WAV track")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--duration", type=float, default=None, help="annotated segment end (s)")
    _add_common(p)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("evaluate", help="evaluate a manifest split")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report directory")
    _add_common(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("report", help="recompute metrics from saved predictions")
    p.add_argument("--predictions", required=True, help="predictions.jsonl from evaluate")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
