"""Operator surface: extract, train, detect, eval, gradcheck, synth.

Every subcommand validates its inputs before doing any compute, is
deterministic under a fixed --seed, and exits 0 on success, 1 on
validation errors, 2 on numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dtpn import io_formats, sampling
from dtpn.config import RunConfig, load_run_config
from dtpn.errors import ConfigError, NumericalError, ValidationError
from dtpn.evaluation import evaluate
from dtpn.model import PyramidDetector
from dtpn.postprocess import detect_video
from dtpn.train import make_synthetic_corpus, train
from dtpn.verification import run_gradient_checks


def _feature_path(directory: Path, video_id: str) -> Path:
    return directory / f"{video_id}.dtpf"


def _check_feature_header(pyramid, run: RunConfig, where: str) -> None:
    if (
        pyramid.num_scales != run.sampling.scales
        or pyramid.base_segments != run.sampling.base_segments
        or pyramid.dim != run.feature_dim
    ):
        raise ConfigError(
            f"{where}: feature header (d={pyramid.dim}, S={pyramid.num_scales}, "
            f"K1={pyramid.base_segments}) does not match config "
            f"(d={run.feature_dim}, S={run.sampling.scales}, "
            f"K1={run.sampling.base_segments})"
        )


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    corpus, features = make_synthetic_corpus(
        seed=args.seed,
        n_videos=args.videos,
        num_classes=args.classes,
        max_instances=args.max_instances,
        cfg=run.sampling,
        feature_dim=run.feature_dim,
    )
    io_formats.write_corpus(out / "corpus.json", corpus)
    for vid, pyramid in features.items():
        io_formats.write_features(_feature_path(out / "features", vid), pyramid)
    if args.emit_frames:
        (out / "frames").mkdir(exist_ok=True)
        rng = np.random.default_rng(args.seed)
        for meta, _ in corpus.videos:
            frames = rng.standard_normal((meta.num_frames, run.frame_dim))
            sampling.write_frames(out / "frames" / f"{meta.id}.frames", frames)
    total = sum(len(gts) for _, gts in corpus.videos)
    print(f"wrote {len(corpus.videos)} videos, {total} segments to {out}")
    return 0


# -- extract ------------------------------------------------------------------


def _extract_one(task):
    frames_path, out_path, run, seed = task
    backbone = sampling.SyntheticBackbone(seed, run.frame_dim, dim=run.feature_dim)
    frames = sampling.load_frames(frames_path, run.frame_dim)
    pyramid = sampling.extract_pyramid(frames, run.sampling, backbone)
    io_formats.write_features(out_path, pyramid)


def cmd_extract(args) -> int:
    run = load_run_config(args.config)
    corpus = io_formats.load_corpus(args.corpus)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.features_in:
        # Pass-through of precomputed features: validate headers, re-emit.
        src = Path(args.features_in)
        for meta, _ in corpus.videos:
            in_path = _feature_path(src, meta.id)
            if not in_path.exists():
                raise ValidationError(f"video {meta.id!r}: missing features {in_path}")
            pyramid = io_formats.read_features(in_path)
            _check_feature_header(pyramid, run, f"video {meta.id!r}")
            pyramid = sampling.extract_pyramid(pyramid, run.sampling)
            io_formats.write_features(_feature_path(out_dir, meta.id), pyramid)
        print(f"passed through features for {len(corpus.videos)} videos")
        return 0

    frames_dir = Path(args.frames_dir)
    tasks = []
    for meta, _ in corpus.videos:
        frames_path = frames_dir / f"{meta.id}.frames"
        if not frames_path.exists():
            raise ValidationError(f"video {meta.id!r}: missing frames {frames_path}")
        tasks.append(
            (frames_path, _feature_path(out_dir, meta.id), run, args.seed)
        )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_extract_one, tasks))
    else:
        for task in tasks:
            _extract_one(task)
    print(f"extracted features for {len(tasks)} videos into {out_dir}")
    return 0


# -- train --------------------------------------------------------------------


def _load_features(corpus, features_dir: Path, run: RunConfig):
    missing = [
        meta.id
        for meta, _ in corpus.videos
        if not _feature_path(features_dir, meta.id).exists()
    ]
    if missing:
        raise ValidationError(f"missing feature files for videos: {missing}")
    features = {}
    for meta, _ in corpus.videos:
        pyramid = io_formats.read_features(_feature_path(features_dir, meta.id))
        _check_feature_header(pyramid, run, f"video {meta.id!r}")
        features[meta.id] = pyramid
    return features


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    train_cfg = run.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    corpus = io_formats.load_corpus(args.corpus)
    features = _load_features(corpus, Path(args.features_dir), run)

    model = PyramidDetector(run.model_config(corpus.num_classes), seed=train_cfg.seed)
    result = train(corpus, features, model, train_cfg)
    model.save(args.out)

    loss_log = args.loss_log or f"{args.out}.losses.csv"
    with open(loss_log, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(result.epoch_losses, start=1):
            writer.writerow([epoch, f"{loss:.8f}"])
    print(
        f"trained {train_cfg.total_epochs} epochs; final loss "
        f"{result.epoch_losses[-1]:.4f}; checkpoint {args.out}; log {loss_log}"
    )
    return 0


# -- detect -------------------------------------------------------------------


def _detect_one(task):
    checkpoint, feature_file, nms_threshold, top_k, score_floor = task
    model = PyramidDetector.load(checkpoint)
    pyramid = io_formats.read_features(feature_file)
    return detect_video(pyramid, model, nms_threshold, top_k, score_floor)


def cmd_detect(args) -> int:
    model = PyramidDetector.load(args.checkpoint)
    corpus = io_formats.load_corpus(args.corpus)
    if corpus.num_classes != model.cfg.num_classes:
        raise ConfigError(
            f"corpus has {corpus.num_classes} classes but checkpoint was trained "
            f"with {model.cfg.num_classes}"
        )
    features_dir = Path(args.features_dir)

    feature_files = []
    for meta, _ in corpus.videos:
        path = _feature_path(features_dir, meta.id)
        if not path.exists():
            raise ValidationError(f"video {meta.id!r}: missing features {path}")
        pyramid = io_formats.read_features(path)
        if (
            pyramid.num_scales != model.cfg.scales
            or pyramid.base_segments != model.cfg.base_segments
            or pyramid.dim != model.cfg.feature_dim
        ):
            raise ConfigError(
                f"video {meta.id!r}: feature header (d={pyramid.dim}, "
                f"S={pyramid.num_scales}, K1={pyramid.base_segments}) does not "
                f"match checkpoint (d={model.cfg.feature_dim}, "
                f"S={model.cfg.scales}, K1={model.cfg.base_segments})"
            )
        feature_files.append((meta.id, path, pyramid))

    results = {}
    if args.jobs > 1:
        tasks = [
            (args.checkpoint, path, args.nms_threshold, args.top_k, args.score_floor)
            for _, path, _ in feature_files
        ]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (vid, _, _), dets in zip(feature_files, pool.map(_detect_one, tasks)):
                results[vid] = dets
    else:
        for vid, _, pyramid in feature_files:
            results[vid] = detect_video(
                pyramid, model, args.nms_threshold, args.top_k, args.score_floor
            )

    io_formats.write_detections(args.out, results, corpus)
    total = sum(len(d) for d in results.values())
    print(f"wrote {total} detections for {len(results)} videos to {args.out}")
    return 0


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    corpus = io_formats.load_corpus(args.corpus)
    results = io_formats.read_detections(args.detections, corpus)
    report = evaluate(
        results, corpus, collect_curves=args.pr_csv is not None, jobs=args.jobs
    )

    print(report.format_table(corpus.labels))
    for c in report.classes_without_gt:
        print(f"warning: class {corpus.labels[c]!r} has no ground truth; "
              f"excluded from mAP", file=sys.stderr)

    if args.report_json:
        Path(args.report_json).write_text(
            json.dumps(report.to_json_dict(corpus.labels), indent=2) + "\n"
        )
    if args.pr_csv:
        with open(args.pr_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "tiou_threshold", "recall", "precision"])
            for (c, t), points in sorted(report.curves.items()):
                for recall, precision in points:
                    writer.writerow(
                        [corpus.labels[c], f"{t:.2f}", f"{recall:.6f}", f"{precision:.6f}"]
                    )
    return 0


# -- gradcheck ----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<36} max rel err {r.max_rel_error:.3e} "
              f"(tolerance {r.tolerance:g})")
    if failed:
        raise NumericalError(
            f"{len(failed)} gradient check(s) failed: "
            + ", ".join(r.name for r in failed)
        )
    print(f"all {len(results)} gradient checks passed")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtpn",
        description="Temporal activity detection: dynamic multi-rate sampling, "
        "a two-branch temporal pyramid network, and mAP evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--emit-frames", action="store_true",
                   help="also write raw frame binaries for the extract command")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="embed frame sources into feature files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--frames-dir", help="directory of <video_id>.frames binaries")
    p.add_argument("--features-in", help="pass precomputed features through instead")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0, help="backbone seed")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a detector on extracted features")
    p.add_argument("--corpus", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--loss-log", default=None, help="CSV path (default <out>.losses.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over feature files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="detection JSON path")
    p.add_argument("--nms-threshold", type=float, default=0.5)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--score-floor", type=float, default=0.005)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a detection file against a corpus")
    p.add_argument("--detections", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report-json", default=None)
    p.add_argument("--pr-csv", default=None,
                   help="write precision-recall curve points as CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--size", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:  # covers ConfigError and FormatError
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
