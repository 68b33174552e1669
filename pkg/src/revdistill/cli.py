"""``revdistill`` command line. Parses flags, builds a RunConfig, hands off to :mod:`revdistill.runner`.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from revdistill import __version__
from revdistill.config import DATASETS, RunConfig, load_config
from revdistill.errors import ConfigError, DataError, RevDistillError

logger = logging.getLogger("revdistill")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=DATASETS)
    g.add_argument("--root", help="dataset root directory")
    g.add_argument("--category", help="MVTec category")
    g.add_argument("--normal-class", type=int, help="class id treated as normal (one-class corpora)")
    g.add_argument("--synth-n-train", type=int)
    g.add_argument("--synth-n-test", type=int)
    g.add_argument("--synth-seed", type=int)


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--backbone", choices=("resnet18", "resnet50", "wide_resnet50"))
    g.add_argument("--resolution", type=int)
    g.add_argument("--stages", help="comma-separated stage ids, e.g. 1,2,3")
    g.add_argument("--weights", help="cache | torchvision | random[:seed] | path to weight file")
    g.add_argument("--ocbe", choices=("mff_oce", "oce", "pre"))
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--device")
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--workers", type=int)


def _scoring_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scoring")
    g.add_argument("--sigma", type=float, help="Gaussian smoothing std in pixels (default 4)")
    g.add_argument("--score", choices=("max", "sum"), help="max: detection score, sum: novelty score")
    g.add_argument("--smooth-before-sum", action="store_true", default=None)
    g.add_argument("--pro-fpr-limit", type=float)
    g.add_argument("--bins", type=int, help="histogram bins")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="revdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on one category / normal class")
    p.add_argument("--config", help="YAML run config; flags override it")
    p.add_argument("--name")
    p.add_argument("--out-dir")
    _data_flags(p)
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate a trained bundle on a test split")
    p.add_argument("bundle", help="bundle file or run directory")
    p.add_argument("--config", help="YAML run config (defaults to the run directory's config.yaml)")
    p.add_argument("--out-dir")
    p.add_argument("--device")
    p.add_argument("--heatmaps", action="store_true", help="export per-image PNG + .sal.f32 maps")
    p.add_argument("--histogram", action="store_true", help="export a score histogram chart")
    p.add_argument("--allow-resolution-mismatch", action="store_true")
    _data_flags(p)
    _scoring_flags(p)

    p = sub.add_parser("infer", help="score individual images")
    p.add_argument("bundle", help="bundle file or run directory")
    p.add_argument("images", nargs="+")
    p.add_argument("--out-dir", help="write heatmaps here")
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--device")

    p = sub.add_parser("ablate", help="train and evaluate one ablation axis")
    p.add_argument("--axis", required=True, choices=("backbone", "layers", "ocbe"))
    p.add_argument("--config")
    p.add_argument("--name")
    p.add_argument("--out-dir")
    _data_flags(p)
    _model_flags(p)
    _scoring_flags(p)

    p = sub.add_parser("visualize", help="render heatmaps and score histograms")
    p.add_argument("--sal", nargs="*", default=[], help=".sal.f32 maps to colourise")
    p.add_argument("--image", help="image to overlay the (single) map on")
    p.add_argument("--scores", help="scores.csv from an eval run, rendered as a histogram")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out-dir", required=True)
    return parser


def _set(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def config_from_args(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = base or (load_config(args.config) if getattr(args, "config", None) else RunConfig())
    d = cfg.to_dict()
    _set(d, "name", getattr(args, "name", None))
    _set(d, "out_dir", getattr(args, "out_dir", None))
    _set(d, "ocbe_variant", getattr(args, "ocbe", None))
    bb, tr, da, sc = d["backbone"], d["train"], d["data"], d["scoring"]
    a = vars(args)
    _set(bb, "family", a.get("backbone"))
    _set(bb, "input_resolution", a.get("resolution"))
    _set(bb, "weights_source", a.get("weights"))
    if a.get("stages"):
        try:
            bb["stages_used"] = [int(s) for s in a["stages"].split(",")]
        except ValueError:
            raise ConfigError(f"--stages must be comma-separated integers, got {a['stages']!r}") from None
    for flag, key in [
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"), ("seed", "seed"),
        ("device", "device"), ("ckpt_every", "ckpt_every"), ("workers", "num_workers"),
    ]:  # fmt: skip
        _set(tr, key, a.get(flag))
    for key in ("dataset", "root", "category", "normal_class", "synth_n_train", "synth_n_test", "synth_seed"):
        _set(da, key, a.get(key))
    for flag, key in [
        ("sigma", "sigma"), ("score", "score"), ("smooth_before_sum", "smooth_before_sum"),
        ("pro_fpr_limit", "pro_fpr_limit"), ("bins", "histogram_bins"),
    ]:  # fmt: skip
        _set(sc, key, a.get(flag))
    return RunConfig.from_dict(d).validate()


def cmd_train(args) -> int:
    from revdistill.runner import run_train

    cfg = config_from_args(args)
    if cfg.name == "run" and cfg.data.category:
        cfg = cfg.replace(name=cfg.data.category)
    bundle, run_dir = run_train(cfg)
    print(json.dumps({"run_dir": str(run_dir), "final_loss": bundle.loss_history[-1], "epochs": bundle.epoch}))
    return 0


def cmd_eval(args) -> int:
    from revdistill.runner import evaluate, final_bundle_path, load_datasets, load_for_eval

    bundle_path = Path(args.bundle)
    base = None
    if args.config:
        base = load_config(args.config)
    elif bundle_path.is_dir() and (bundle_path / "config.yaml").is_file():
        base = load_config(bundle_path / "config.yaml")
    elif (final_bundle_path(bundle_path).parent / "config.yaml").is_file():
        base = load_config(final_bundle_path(bundle_path).parent / "config.yaml")
    out_dir = args.out_dir
    args.out_dir = None
    cfg = config_from_args(args, base)
    bundle = load_for_eval(bundle_path, device=args.device)
    cfg = cfg.replace(backbone={"input_resolution": bundle.resolution})
    _, test_set = load_datasets(cfg)
    out = Path(out_dir) if out_dir else final_bundle_path(bundle_path).parent / "eval"
    report = evaluate(
        bundle,
        test_set,
        cfg.scoring,
        out_dir=out,
        heatmaps=args.heatmaps,
        histogram_png=args.histogram,
        allow_resolution_mismatch=args.allow_resolution_mismatch,
    )
    print(json.dumps(report.summary() | {"out_dir": str(out)}, indent=2))
    return 0


def cmd_infer(args) -> int:
    from revdistill.runner import infer_images, load_for_eval

    missing = [p for p in args.images if not Path(p).is_file()]
    if missing:
        raise DataError(f"image not found: {missing[0]}")
    bundle = load_for_eval(args.bundle, device=args.device)
    for entry in infer_images(bundle, args.images, args.out_dir, sigma=args.sigma):
        print(json.dumps(entry))
    return 0


def cmd_ablate(args) -> int:
    from revdistill.runner import run_ablate

    cfg = config_from_args(args)
    rows = run_ablate(cfg, args.axis)
    w = csv.DictWriter(sys.stdout, fieldnames=["variant", "image_auroc", "pixel_auroc", "pro_score"], extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return 0


def cmd_visualize(args) -> int:
    from revdistill.data import read_image
    from revdistill.metrics import score_histogram
    from revdistill.scoring import read_sal
    from revdistill.viz import histogram_chart, overlay

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not args.sal and not args.scores:
        raise ConfigError("nothing to visualize: pass --sal and/or --scores")
    image = read_image(args.image) if args.image else None
    for path in args.sal:
        if not Path(path).is_file():
            raise DataError(f"map not found: {path}")
        name = Path(path).name.removesuffix(".sal.f32")
        overlay(read_sal(path), image).save(out / f"{name}.overlay.png")
    if args.scores:
        if not Path(args.scores).is_file():
            raise DataError(f"scores file not found: {args.scores}")
        with open(args.scores, newline="") as f:
            rows = list(csv.DictReader(f))
        scores = np.array([float(r["score"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
        histogram_chart(score_histogram(scores, labels, args.bins), out / "histogram.png")
    print(str(out))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate, "visualize": cmd_visualize}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except RevDistillError as exc:
        if isinstance(exc, ConfigError) and "required" in str(exc):
            parser.print_usage(sys.stderr)
        print(f"revdistill: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
