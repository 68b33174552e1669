"""Feature-regression loss, training loop and model bundles."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open
from torch import nn
from torch.utils.data import DataLoader, Dataset

from revdistill import __version__
from revdistill.backbone import BackboneSpec, FeaturePyramid, TeacherHandle, extract_features, load_teacher
from revdistill.decoder import DecoderSpec, StudentDecoder, check_mirror
from revdistill.errors import ConfigError, DataError, NumericError, ShapeError
from revdistill.ocbe import OCBE, OcbeConfig

logger = logging.getLogger(__name__)

EPS = 1e-8
BUNDLE_FORMAT = "revdistill.bundle/1"
DEVICE_ENV = "REVDISTILL_DEVICE"


def default_device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    adam_betas: tuple[float, float] = (0.5, 0.999)
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    device: str = field(default_factory=default_device)
    stages_used: tuple[int, ...] = (1, 2, 3)
    ckpt_every: int = 50
    num_workers: int = 0

    def __post_init__(self) -> None:
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.stages_used = tuple(int(s) for s in self.stages_used)
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.ckpt_every <= 0:
            raise ConfigError("learning_rate, epochs, batch_size and ckpt_every must be positive")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            raise ConfigError(f"adam_betas must lie in (0, 1), got {self.adam_betas}")
        if self.num_workers < 0:
            raise ConfigError("num_workers must be non-negative")


@dataclass
class AnomalyMapSet:
    """Per-stage maps, each ``B x H_k x W_k``, ordered like ``stage_ids``."""

    per_stage: list[torch.Tensor]
    stage_ids: tuple[int, ...]

    def select(self, stages: Iterable[int]) -> "AnomalyMapSet":
        stages = tuple(stages)
        missing = set(stages) - set(self.stage_ids)
        if missing:
            raise ShapeError(f"stages {sorted(missing)} not present in {self.stage_ids}")
        return AnomalyMapSet([self.per_stage[self.stage_ids.index(k)] for k in stages], stages)

    def __mul__(self, alpha: float) -> "AnomalyMapSet":
        return AnomalyMapSet([m * alpha for m in self.per_stage], self.stage_ids)

    __rmul__ = __mul__


def anomaly_map(f_e: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
    """One minus the cosine similarity of channel vectors at every location.

    Works on ``C x H x W`` or ``B x C x H x W`` inputs; the channel axis is
    dim ``-3``. ``1e-8`` is added to each norm so all-zero vectors (common after
    ReLU) are harmless.
    """
    if f_e.shape != f_d.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_e.shape)} vs {tuple(f_d.shape)}")
    dot = (f_e * f_d).sum(dim=-3)
    denom = (f_e.norm(dim=-3) + EPS) * (f_d.norm(dim=-3) + EPS)
    return (1.0 - dot / denom).clamp(0.0, 2.0)


def anomaly_maps(teacher: FeaturePyramid, student: FeaturePyramid) -> AnomalyMapSet:
    if len(teacher) != len(student):
        raise ShapeError(f"pyramid lengths differ: {len(teacher)} vs {len(student)}")
    check_mirror(teacher, student)
    return AnomalyMapSet([anomaly_map(t, s) for t, s in zip(teacher, student)], teacher.stage_ids)


def loss_from_maps(maps: AnomalyMapSet) -> torch.Tensor:
    # spatial mean per sample, summed over stages, then averaged over the batch
    total = 0.0
    for m in maps.per_stage:
        total = total + m.flatten(-2).mean(dim=-1)
    return total.mean()


def kd_loss(teacher: FeaturePyramid, student: FeaturePyramid) -> torch.Tensor:
    """Sum over stages of the spatially averaged anomaly map, batch-averaged."""
    return loss_from_maps(anomaly_maps(teacher, student))


def _first_nonfinite_stage(maps: AnomalyMapSet) -> int | None:
    for k, m in zip(maps.stage_ids, maps.per_stage):
        if not torch.isfinite(m).all():
            return k
    return None


@dataclass
class ModelBundle:
    """Frozen teacher, trained OCBE and decoder, plus everything needed to reproduce them."""

    backbone: BackboneSpec
    teacher: TeacherHandle
    ocbe: OCBE
    decoder: StudentDecoder
    train_config: TrainConfig
    ocbe_variant: str = "mff_oce"
    loss_history: list[float] = field(default_factory=list)
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def teacher_digest(self) -> str:
        return self.teacher.digest

    @property
    def resolution(self) -> int:
        return self.backbone.input_resolution

    def to(self, device: torch.device | str) -> "ModelBundle":
        self.teacher.to(device)
        self.ocbe.to(device)
        self.decoder.to(device)
        return self

    @property
    def device(self) -> torch.device:
        return next(self.decoder.parameters()).device

    def eval(self) -> "ModelBundle":
        self.ocbe.eval()
        self.decoder.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return self.ocbe.trainable_parameters() + list(self.decoder.parameters())

    def metadata(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "code_version": __version__,
            "backbone": dataclasses.asdict(self.backbone),
            "ocbe_variant": self.ocbe_variant,
            "train_config": dataclasses.asdict(self.train_config),
            "teacher_digest": self.teacher_digest,
            "seed": self.train_config.seed,
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "extra": self.extra,
        }

    def save(self, path: str | os.PathLike) -> Path:
        """Write a single safetensors file; the JSON metadata lives in its text header."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {}
        for prefix, module in (("ocbe", self.ocbe), ("decoder", self.decoder)):
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t.detach().cpu().contiguous()
        meta = json.dumps(self.metadata(), indent=1, sort_keys=True)
        save_file(tensors, str(path), metadata={"format": BUNDLE_FORMAT, "meta": meta})
        return path


def build_model(
    backbone: BackboneSpec, ocbe_variant: str = "mff_oce", teacher: TeacherHandle | None = None
) -> tuple[TeacherHandle, OCBE, StudentDecoder]:
    """Load the teacher and create freshly initialised OCBE and decoder (uses the global RNG)."""
    if teacher is None:
        teacher = load_teacher(backbone, keep_stage4=ocbe_variant == "pre")
    ocbe = OCBE(OcbeConfig(backbone.family, backbone.stages_used, ocbe_variant), teacher)
    decoder = StudentDecoder(DecoderSpec(backbone.family, backbone.stages_used))
    return teacher, ocbe, decoder


def read_bundle_metadata(path: str | os.PathLike) -> dict:
    try:
        with safe_open(str(path), framework="pt") as f:
            header = f.metadata() or {}
    except Exception as exc:
        raise ConfigError(f"cannot read bundle {path}: {exc}") from exc
    if header.get("format") != BUNDLE_FORMAT:
        raise ConfigError(f"{path} is not a {BUNDLE_FORMAT} file")
    return json.loads(header["meta"])


def load_bundle(path: str | os.PathLike, device: str | None = None, check_digest: bool = True) -> ModelBundle:
    """Rebuild a bundle, verifying that the teacher loads with its recorded digest."""
    meta = read_bundle_metadata(path)
    backbone = BackboneSpec(**meta["backbone"])
    cfg = TrainConfig(**meta["train_config"])
    teacher, ocbe, decoder = build_model(backbone, meta["ocbe_variant"])
    if check_digest and teacher.digest != meta["teacher_digest"]:
        raise ConfigError(
            f"teacher digest {teacher.digest[:12]} differs from the bundle's {meta['teacher_digest'][:12]}"
        )
    state = load_file(str(path))
    for prefix, module in (("ocbe", ocbe), ("decoder", decoder)):
        sub = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sub, strict=True)
    bundle = ModelBundle(
        backbone=backbone,
        teacher=teacher,
        ocbe=ocbe,
        decoder=decoder,
        train_config=cfg,
        ocbe_variant=meta["ocbe_variant"],
        loss_history=list(meta["loss_history"]),
        epoch=int(meta["epoch"]),
        extra=meta.get("extra", {}),
    )
    bundle.to(device or cfg.device)
    return bundle.eval()


def _images(batch) -> torch.Tensor:
    if isinstance(batch, dict):
        if "label" in batch and bool((torch.as_tensor(batch["label"]) != 0).any()):
            raise DataError("anomalous sample reached the trainer; training data must be normal only")
        return batch["image"]
    if isinstance(batch, (list, tuple)):
        return batch[0]
    return batch


def train_step(bundle: ModelBundle, images: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    teacher_pyr = extract_features(bundle.teacher, images)
    code = bundle.ocbe(teacher_pyr)
    student_pyr = bundle.decoder(code)
    maps = anomaly_maps(teacher_pyr, student_pyr)
    loss = loss_from_maps(maps)
    if not torch.isfinite(loss):
        stage = _first_nonfinite_stage(maps)
        raise NumericError(f"non-finite loss; first non-finite anomaly map at stage {stage}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train(
    teacher: TeacherHandle,
    ocbe: OCBE,
    decoder: StudentDecoder,
    dataset: Dataset,
    cfg: TrainConfig,
    run_dir: str | os.PathLike | None = None,
    ocbe_variant: str | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    max_steps: int | None = None,
) -> ModelBundle:
    """Fit OCBE and decoder so the decoder reproduces the frozen teacher's pyramid.

    One Adam optimiser covers all trainable OCBE and decoder parameters. With
    ``run_dir`` set, a line-delimited JSON log (``train_log.jsonl``) and
    ``ckpt_<epoch>.bundle`` files are written there. ``max_steps`` stops
    early after that many optimiser steps (used by smoke tests).
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if tuple(cfg.stages_used) != teacher.spec.stages_used:
        raise ConfigError(f"train stages {cfg.stages_used} != teacher stages {teacher.spec.stages_used}")
    device = torch.device(cfg.device)
    torch.manual_seed(cfg.seed)
    bundle = ModelBundle(
        backbone=teacher.spec,
        teacher=teacher,
        ocbe=ocbe,
        decoder=decoder,
        train_config=cfg,
        ocbe_variant=ocbe_variant or ocbe.cfg.variant,
    ).to(device)
    params = bundle.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.jsonl"
        log_path.write_text("")

    start = time.perf_counter()
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        bundle.ocbe.train()
        bundle.decoder.train()
        losses = []
        for batch in loader:
            images = _images(batch).to(device)
            losses.append(train_step(bundle, images, optimizer))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean_loss = sum(losses) / len(losses)
        bundle.loss_history.append(mean_loss)
        bundle.epoch = epoch
        wall = time.perf_counter() - start
        logger.info("epoch %d/%d loss %.5f (%.1fs)", epoch, cfg.epochs, mean_loss, wall)
        if log_path is not None:
            with log_path.open("a") as f:
                f.write(json.dumps({"epoch": epoch, "mean_loss": mean_loss, "wallclock": round(wall, 3)}) + "\n")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        done = epoch == cfg.epochs or (max_steps is not None and steps >= max_steps)
        if run_dir is not None and (epoch % cfg.ckpt_every == 0 or done):
            bundle.save(run_dir / f"ckpt_{epoch}.bundle")
        if done:
            break

    if teacher.current_digest() != teacher.digest:
        raise NumericError("teacher parameters changed during training")
    return bundle.eval()


def forward_inference(
    bundle: ModelBundle, batch: torch.Tensor, allow_resolution_mismatch: bool = False
) -> tuple[FeaturePyramid, FeaturePyramid, AnomalyMapSet]:
    """Teacher pyramid, student pyramid and per-stage anomaly maps for a normalised batch."""
    bundle.eval()
    batch = batch.to(bundle.device)
    with torch.no_grad():
        teacher_pyr = extract_features(bundle.teacher, batch, allow_resolution_mismatch)
        student_pyr = bundle.decoder(bundle.ocbe(teacher_pyr))
        maps = anomaly_maps(teacher_pyr, student_pyr)
    stage = _first_nonfinite_stage(maps)
    if stage is not None:
        raise NumericError(f"non-finite anomaly map at stage {stage}")
    return teacher_pyr, student_pyr, maps
