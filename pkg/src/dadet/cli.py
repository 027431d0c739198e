"""Command-line surface: synthesis, training, evaluation and mining workflows.

Commands compose into the full pipeline:

    dadet make-fixture --output-dir data/shapes
    dadet synth-fog   --input data/shapes --split train --output-dir data/shapes_foggy
    dadet synth-aux   --input data/shapes --split train --rain-library data/shapes/rain_maps \
                      --output-dir data/shapes_rainy
    dadet train       --config data/shapes/config.yaml --output-dir runs/adapted
    dadet eval        --checkpoint runs/adapted --dataset data/shapes_foggy --split val \
                      --output runs/adapted/eval.json
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

from .adversarial import AdversarialConfig, compute_lambda_adv
from .config import RunConfig
from .datasets import ingest_dataset
from .errors import ConfigurationError, DadetError
from .evaluation import evaluate_detections, mine_hard_examples
from .fixture import make_fixture
from .synthesis import (
    RainMixParams,
    derive_rng,
    load_image,
    save_image,
    synthesize_auxiliary,
    synthesize_fog,
)
from .training import load_checkpoint, run_training


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _list_split_images(root: Path, split: str) -> list[Path]:
    images_dir = root / "images" / split
    if not images_dir.is_dir():
        raise ConfigurationError(f"missing images directory {images_dir}")
    files = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise ConfigurationError(f"no images under {images_dir}")
    return files


def _mirror_annotations(input_root: Path, output_root: Path, split: str) -> None:
    src = input_root / "annotations" / f"{split}.json"
    if src.is_file():
        dst = output_root / "annotations" / f"{split}.json"
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)


def cmd_synth_fog(args: argparse.Namespace) -> int:
    input_root = Path(args.input)
    output_root = Path(args.output_dir)
    density = args.density
    light = args.light
    seed = args.seed
    if args.config:
        cfg = RunConfig.from_file(args.config)
        density = cfg.synthesis.fog_density if density is None else density
        light = cfg.synthesis.atmospheric_light if light is None else light
        seed = cfg.seed if seed is None else seed
    density = 0.8 if density is None else density
    light = 0.9 if light is None else light
    seed = 0 if seed is None else seed

    files = _list_split_images(input_root, args.split)
    out_dir = output_root / "images" / args.split
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for idx, path in enumerate(files):
        foggy = synthesize_fog(load_image(path), density, light)
        out_path = out_dir / path.name
        save_image(out_path, foggy)
        manifest.append(
            {
                "source_file": str(path),
                "output_file": str(out_path),
                "seed": seed,
                "parameters": {"index": idx, "density": density,
                               "atmospheric_light": light},
            }
        )
    _mirror_annotations(input_root, output_root, args.split)
    _write_json(output_root / f"synth_fog_{args.split}_manifest.json", manifest)
    print(f"synthesized {len(manifest)} foggy images into {output_root}")
    return 0


def cmd_synth_aux(args: argparse.Namespace) -> int:
    input_root = Path(args.input)
    output_root = Path(args.output_dir)
    seed = args.seed
    params = RainMixParams()
    library = args.rain_library
    if args.config:
        cfg = RunConfig.from_file(args.config)
        params = cfg.synthesis.rainmix
        seed = cfg.seed if seed is None else seed
        library = library or cfg.paths.rain_library
    seed = 0 if seed is None else seed
    if not library:
        raise ConfigurationError("a rain library directory is required (--rain-library)")

    files = _list_split_images(input_root, args.split)
    out_dir = output_root / "images" / args.split
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for idx, path in enumerate(files):
        rng = derive_rng(seed, idx)
        rainy = synthesize_auxiliary(load_image(path), library, rng, params)
        out_path = out_dir / path.name
        save_image(out_path, rainy)
        manifest.append(
            {
                "source_file": str(path),
                "output_file": str(out_path),
                "seed": seed,
                "parameters": {"index": idx, **dataclasses.asdict(params)},
            }
        )
    _mirror_annotations(input_root, output_root, args.split)
    _write_json(output_root / f"synth_aux_{args.split}_manifest.json", manifest)
    print(f"synthesized {len(manifest)} auxiliary images into {output_root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    train_cfg = cfg.train
    if args.mode is not None:
        train_cfg = dataclasses.replace(train_cfg, aligned_mode=args.mode == "aligned")
    if args.source_only:
        train_cfg = dataclasses.replace(train_cfg, loss_weight=0.0)
    cfg = dataclasses.replace(cfg, train=train_cfg)

    split = cfg.paths.train_split
    source = ingest_dataset(cfg.paths.source_root, split, labeled=True,
                            categories=cfg.categories)
    target = ingest_dataset(cfg.paths.target_root, split, labeled=False,
                            categories=cfg.categories)
    aux = ingest_dataset(cfg.paths.aux_root, split, labeled=False,
                         categories=cfg.categories)

    output_dir = Path(args.output_dir)
    result = run_training(
        source, target, aux,
        detector_cfg=cfg.detector,
        train_cfg=cfg.train,
        adv_cfg=cfg.adversarial,
        output_dir=output_dir,
        seed=cfg.seed,
        config_snapshot=cfg.to_dict(),
    )
    _write_json(
        output_dir / "manifests.json",
        {
            "source": [e.file for e in source.entries],
            "target": [e.file for e in target.entries],
            "auxiliary": [e.file for e in aux.entries],
        },
    )
    print(
        f"trained {len(result.reports)} iterations "
        f"({result.skipped} skipped) -> {result.checkpoint_dir}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    detector, _, _ = load_checkpoint(args.checkpoint)
    dataset = ingest_dataset(args.dataset, args.split, labeled=True)
    if tuple(dataset.categories) != tuple(detector.config.categories):
        raise ConfigurationError(
            f"checkpoint categories {detector.config.categories} do not match "
            f"dataset categories {dataset.categories}"
        )
    samples = []
    for entry in dataset.entries:
        image = load_image(entry.path)
        detections = detector.detect(
            image, score_threshold=args.score_threshold, nms_iou=args.nms_iou
        )
        samples.append((entry.file, detections, entry.boxes))
    result = evaluate_detections(samples, dataset.categories, args.iou_threshold)

    print(f"{'class':<12}{'AP':>10}")
    for category, ap in result.per_class_ap.items():
        shown = "undefined" if ap is None else f"{ap:.4f}"
        print(f"{category:<12}{shown:>10}")
    print(f"{'mAP':<12}{result.mean_ap:>10.4f}")

    _write_json(
        Path(args.output),
        {
            "per_class_ap": result.per_class_ap,
            "mean_ap": result.mean_ap,
            "iou_threshold": result.iou_threshold,
            "interpolation": result.interpolation,
            "detection_count": result.detection_count,
        },
    )
    return 0


def cmd_mine_hard(args: argparse.Namespace) -> int:
    detector, _, _ = load_checkpoint(args.checkpoint)
    source = ingest_dataset(args.source, args.split, labeled=False)
    target = ingest_dataset(args.target, args.split, labeled=False)
    by_name = {e.file: e for e in target.entries}
    pairs = []
    for entry in source.entries:
        twin = by_name.get(entry.file)
        if twin is None:
            raise ConfigurationError(f"target split lacks aligned image {entry.file}")
        pairs.append((entry.file, load_image(entry.path), load_image(twin.path)))
    records = mine_hard_examples(pairs, detector.extract_features, args.k)
    _write_json(
        Path(args.output),
        [{"image_id": r.image_id, "ah": r.ah, "rank": r.rank} for r in records],
    )
    print(f"ranked {len(records)} hard examples -> {args.output}")
    return 0


def cmd_plot_lambda(args: argparse.Namespace) -> int:
    if args.config:
        adv = RunConfig.from_file(args.config).adversarial
    else:
        adv = AdversarialConfig(lambda0=args.lambda0, alpha=args.alpha, beta=args.beta)
    lines = ["l_c\tlambda_adv"]
    for i in range(args.samples):
        l_c = (i + 1) / args.samples * 2.0  # samples over (0, 2]
        lines.append(f"{repr(l_c)}\t{repr(compute_lambda_adv(l_c, adv))}")
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.samples} curve samples -> {out}")
    return 0


def cmd_make_fixture(args: argparse.Namespace) -> int:
    root = make_fixture(
        args.output_dir,
        seed=0 if args.seed is None else args.seed,
        num_train=args.num_train,
        num_val=args.num_val,
    )
    print(f"fixture written to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dadet",
        description="Domain-adaptive object detection trainer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration YAML")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--output-dir", help="output directory")

    p = sub.add_parser("synth-fog", parents=[common],
                       help="corrupt a split with uniform-depth fog")
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--light", type=float, default=None)
    p.set_defaults(func=cmd_synth_fog)

    p = sub.add_parser("synth-aux", parents=[common],
                       help="blend transformed rain maps over a split")
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--rain-library", default=None)
    p.set_defaults(func=cmd_synth_aux)

    p = sub.add_parser("train", parents=[common], help="run adaptation training")
    p.add_argument("--mode", choices=("aligned", "unaligned"), default=None)
    p.add_argument("--source-only", action="store_true",
                   help="treat the adaptation weight as 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-class AP / mAP at IoU 0.5")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--output", required=True)
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mine-hard", parents=[common],
                       help="rank aligned pairs by approximated hardness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_mine_hard)

    p = sub.add_parser("plot-lambda", parents=[common],
                       help="tabulate the reversal-strength curve")
    p.add_argument("--output", required=True)
    p.add_argument("--lambda0", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.63)
    p.add_argument("--beta", type=float, default=30.0)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_plot_lambda)

    p = sub.add_parser("make-fixture", parents=[common],
                       help="generate the synthetic-shapes benchmark")
    p.add_argument("--num-train", type=int, default=200)
    p.add_argument("--num-val", type=int, default=60)
    p.set_defaults(func=cmd_make_fixture)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.config:
        parser.error("train requires --config")
    if args.command in ("train", "make-fixture", "synth-fog", "synth-aux") \
            and not args.output_dir:
        parser.error(f"{args.command} requires --output-dir")
    try:
        return args.func(args)
    except DadetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
