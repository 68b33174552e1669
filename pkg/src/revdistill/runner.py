"""End-to-end workflows: train a run, score and evaluate a test set, run inference, ablations."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader

from revdistill import __version__
from revdistill.config import RunConfig, ScoringConfig
from revdistill.data import (
    ImageSet,
    load_cifar10_binary,
    load_idx_corpus,
    load_image_folder_corpus,
    load_mvtec_category,
    load_one_class,
    normalize_image,
    read_image,
    synth_defect_corpus,
)
from revdistill.distill import ModelBundle, build_model, forward_inference, load_bundle, train
from revdistill.errors import ConfigError, DataError, MetricError
from revdistill.metrics import EvalReport, auroc, pixel_auroc, pro_score, score_histogram
from revdistill.scoring import detection_score, export_heatmap, localization_map, novelty_score

logger = logging.getLogger(__name__)

ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "backbone": [
        ("ResNet18", {"backbone": {"family": "resnet18"}}),
        ("ResNet50", {"backbone": {"family": "resnet50"}}),
        ("WResNet50", {"backbone": {"family": "wide_resnet50"}}),
    ],
    "layers": [
        ("M1", {"backbone": {"stages_used": [1]}}),
        ("M2", {"backbone": {"stages_used": [2]}}),
        ("M3", {"backbone": {"stages_used": [3]}}),
        ("M2,3", {"backbone": {"stages_used": [2, 3]}}),
        ("M1,2,3", {"backbone": {"stages_used": [1, 2, 3]}}),
    ],
    "ocbe": [
        ("Pre", {"ocbe_variant": "pre"}),
        ("Pre+OCE", {"ocbe_variant": "oce"}),
        ("Pre+OCE+MFF", {"ocbe_variant": "mff_oce"}),
    ],
}


def load_datasets(cfg: RunConfig) -> tuple[ImageSet, ImageSet]:
    d = cfg.data
    res = cfg.backbone.input_resolution
    if d.dataset == "synthetic":
        return synth_defect_corpus(d.synth_seed, d.synth_n_train, d.synth_n_test, res)
    if not Path(d.root).exists():
        raise DataError(f"dataset root {d.root} does not exist")
    if d.dataset == "mvtec":
        return load_mvtec_category(d.root, d.category, res)
    corpus = {"idx": load_idx_corpus, "cifar10": load_cifar10_binary, "folder": load_image_folder_corpus}[d.dataset](
        d.root
    )
    return load_one_class(corpus, d.normal_class, res)


def run_train(cfg: RunConfig, train_set: ImageSet | None = None) -> tuple[ModelBundle, Path]:
    """Train one category/class; the run directory ends up with config, log and checkpoints."""
    cfg.validate()
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    if train_set is None:
        train_set, _ = load_datasets(cfg)
    torch.manual_seed(cfg.train.seed)
    teacher, ocbe, decoder = build_model(cfg.backbone, cfg.ocbe_variant)
    bundle = train(teacher, ocbe, decoder, train_set, cfg.train, run_dir=run_dir, ocbe_variant=cfg.ocbe_variant)
    final = run_dir / f"ckpt_{bundle.epoch}.bundle"
    (run_dir / "run.json").write_text(
        json.dumps(
            {"code_version": __version__, "teacher_digest": bundle.teacher_digest, "final_bundle": final.name},
            indent=2,
        )
        + "\n"
    )
    return bundle, run_dir


def final_bundle_path(path: str | Path) -> Path:
    """Accept a bundle file or a run directory (picks ``run.json``'s final bundle)."""
    path = Path(path)
    if path.is_dir():
        meta = path / "run.json"
        if meta.is_file():
            return path / json.loads(meta.read_text())["final_bundle"]
        ckpts = sorted(path.glob("ckpt_*.bundle"), key=lambda p: int(p.stem.split("_")[1]))
        if not ckpts:
            raise DataError(f"no bundle found in {path}")
        return ckpts[-1]
    if not path.is_file():
        raise DataError(f"bundle {path} not found")
    return path


@dataclass
class ScoredSet:
    maps: np.ndarray  # N x R x R, smoothed localisation maps
    scores: np.ndarray  # image-level scores
    labels: np.ndarray
    masks: np.ndarray  # N x R x R bool
    has_mask: np.ndarray
    names: list[str]
    defect_types: list[str]


def score_dataset(
    bundle: ModelBundle,
    dataset: ImageSet,
    scoring: ScoringConfig | None = None,
    allow_resolution_mismatch: bool = False,
) -> ScoredSet:
    scoring = scoring or ScoringConfig()
    loader = DataLoader(dataset, batch_size=scoring.batch_size, shuffle=False)
    maps, scores, masks, has_mask = [], [], [], []
    for batch in loader:
        _, _, amaps = forward_inference(bundle, batch["image"], allow_resolution_mismatch)
        res = batch["image"].shape[-1]
        s = localization_map(amaps, res, scoring.sigma)
        if scoring.score == "max":
            scores.append(np.atleast_1d(detection_score(s)))
        else:
            base = s if scoring.smooth_before_sum else localization_map(amaps, res, sigma=0)
            scores.append(np.atleast_1d(novelty_score(base)))
        maps.append(s.map.astype(np.float32))
        masks.append(batch["mask"].numpy() > 0.5)
        has_mask.append(np.asarray(batch["has_mask"], dtype=bool))
    return ScoredSet(
        maps=np.concatenate(maps),
        scores=np.concatenate(scores),
        labels=dataset.labels,
        masks=np.concatenate(masks),
        has_mask=np.concatenate(has_mask),
        names=[f"{i:04d}_{r.name}" for i, r in enumerate(dataset.records)],
        defect_types=[r.defect_type for r in dataset.records],
    )


def report_from_scores(scored: ScoredSet, scoring: ScoringConfig | None = None, config: dict | None = None) -> EvalReport:
    """Image AUROC always; pixel AUROC and PRO over samples that carry masks, when any are anomalous."""
    scoring = scoring or ScoringConfig()
    image_auroc = auroc(scored.scores, scored.labels)
    pix = pro = None
    sel = scored.has_mask
    if sel.any() and scored.masks[sel].any():
        pix = pixel_auroc(scored.maps[sel], scored.masks[sel])
        pro = pro_score(scored.maps[sel], scored.masks[sel], fpr_limit=scoring.pro_fpr_limit)
    per_class = {}
    normal = scored.labels == 0
    for defect in sorted(set(scored.defect_types) - {"good"}):
        idx = np.array([t == defect for t in scored.defect_types]) | normal
        try:
            per_class[defect] = {"image_auroc": auroc(scored.scores[idx], scored.labels[idx])}
        except MetricError:
            continue
    samples = [
        {"name": n, "defect_type": t, "label": int(y), "score": float(s)}
        for n, t, y, s in zip(scored.names, scored.defect_types, scored.labels, scored.scores)
    ]
    return EvalReport(
        image_auroc=image_auroc,
        pixel_auroc=pix,
        pro_score=pro,
        per_class=per_class,
        histogram=score_histogram(scored.scores, scored.labels, scoring.histogram_bins),
        config=config or {},
        samples=samples,
    )


def evaluate(
    bundle: ModelBundle,
    dataset: ImageSet,
    scoring: ScoringConfig | None = None,
    out_dir: str | Path | None = None,
    heatmaps: bool = False,
    histogram_png: bool = False,
    allow_resolution_mismatch: bool = False,
) -> EvalReport:
    scoring = scoring or ScoringConfig()
    scored = score_dataset(bundle, dataset, scoring, allow_resolution_mismatch)
    config = {"bundle": bundle.metadata() | {"loss_history": None}, "scoring": scoring.__dict__}
    report = report_from_scores(scored, scoring, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir)
        if heatmaps:
            for name, m in zip(scored.names, scored.maps):
                export_heatmap(out_dir / "heatmaps", name, m)
        if histogram_png:
            from revdistill.viz import histogram_chart

            histogram_chart(report.histogram, out_dir / "histogram.png")
    return report


def infer_images(
    bundle: ModelBundle,
    paths: Sequence[str | Path],
    out_dir: str | Path | None = None,
    sigma: float = 4.0,
) -> list[dict]:
    """Detection score per image file, optionally exporting PNG + raw heatmaps."""
    res = bundle.resolution
    results = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise DataError(f"image not found: {p}")
        x = normalize_image(read_image(str(p)), res).unsqueeze(0)
        _, _, amaps = forward_inference(bundle, x)
        s = localization_map(amaps, res, sigma)
        entry = {"image": str(p), "score": float(detection_score(s[0]))}
        if out_dir is not None:
            png, raw = export_heatmap(out_dir, p.stem, s.map[0])
            entry.update(heatmap=str(png), raw=str(raw))
        results.append(entry)
    return results


def run_ablate(cfg: RunConfig, axis: str) -> list[dict]:
    """Train and evaluate every arm of one ablation axis; writes ``ablation_<axis>.csv``."""
    if axis not in ABLATIONS:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATIONS)}")
    cfg.validate()
    base_dir = cfg.run_dir / f"ablate_{axis}"
    rows = []
    for label, override in ABLATIONS[axis]:
        slug = label.replace("+", "_").replace(",", "")
        arm = cfg.replace(**override, name=f"{cfg.name}-{slug}", out_dir=str(base_dir / slug))
        train_set, test_set = load_datasets(arm)
        bundle, run_dir = run_train(arm, train_set)
        report = evaluate(bundle, test_set, arm.scoring, out_dir=run_dir / "eval")
        rows.append(
            {
                "axis": axis,
                "variant": label,
                "image_auroc": report.image_auroc,
                "pixel_auroc": report.pixel_auroc,
                "pro_score": report.pro_score,
                "bundle": str(final_bundle_path(run_dir)),
            }
        )
    base_dir.mkdir(parents=True, exist_ok=True)
    with (base_dir / f"ablation_{axis}.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def load_for_eval(path: str | Path, device: str | None = None) -> ModelBundle:
    return load_bundle(final_bundle_path(path), device=device)
