"""Frozen teacher encoder built on a residual classification network.

The teacher runs the network stem followed by residual stages 1..3 and hands
back the output of each requested stage. Stage ``k`` sits at stride
``2 ** (k + 1)``, so a 256 px input gives 64, 32 and 16 px feature maps.

Inputs are expected in ImageNet-normalized form, see :data:`IMAGENET_MEAN` and
:data:`IMAGENET_STD`.
"""

from __future__ import annotations

import glob
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn
from torchvision import models

from revdistill.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHTS_DIR_ENV = "REVDISTILL_WEIGHTS_DIR"
DEFAULT_WEIGHTS_DIR = "~/.cache/revdistill/weights"


@dataclass(frozen=True)
class FamilyInfo:
    constructor: str
    block: str  # "basic" | "bottleneck"
    blocks_per_stage: tuple[int, int, int, int]
    stage_channels: tuple[int, int, int, int]
    width_per_group: int = 64


FAMILIES: dict[str, FamilyInfo] = {
    "resnet18": FamilyInfo("resnet18", "basic", (2, 2, 2, 2), (64, 128, 256, 512)),
    "resnet50": FamilyInfo("resnet50", "bottleneck", (3, 4, 6, 3), (256, 512, 1024, 2048)),
    "wide_resnet50": FamilyInfo(
        "wide_resnet50_2", "bottleneck", (3, 4, 6, 3), (256, 512, 1024, 2048), width_per_group=128
    ),
}


def family_info(family: str) -> FamilyInfo:
    try:
        return FAMILIES[family]
    except KeyError:
        raise ConfigError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class BackboneSpec:
    """Which teacher to build and which of its stages to distill.

    ``weights_source`` accepts:

    * ``"cache"``: look up ``<family>.<digest>.bin`` in ``$REVDISTILL_WEIGHTS_DIR``
      (default ``~/.cache/revdistill/weights``);
    * ``"torchvision"``: torchvision's default ImageNet checkpoint from the torch hub cache;
    * ``"random"`` or ``"random:<seed>"``: seeded He initialisation with batch-norm
      statistics calibrated on seeded Gaussian noise, for tests and desk-scale runs
      without pretrained weights;
    * any other string is treated as a path to a weight file.
    """

    family: str = "wide_resnet50"
    input_resolution: int = 256
    stages_used: tuple[int, ...] = (1, 2, 3)
    weights_source: str = "cache"

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages_used", tuple(int(s) for s in self.stages_used))
        family_info(self.family)
        stages = self.stages_used
        if not stages or any(s not in (1, 2, 3) for s in stages) or list(stages) != sorted(set(stages)):
            raise ConfigError(f"stages_used must be a non-empty increasing subset of (1, 2, 3), got {stages}")
        if self.input_resolution <= 0 or self.input_resolution % 32:
            raise ConfigError(f"input_resolution must be a positive multiple of 32, got {self.input_resolution}")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        widths = family_info(self.family).stage_channels
        return tuple(widths[k - 1] for k in self.stages_used)

    def stage_shape(self, stage: int, resolution: int | None = None) -> tuple[int, int, int]:
        res = self.input_resolution if resolution is None else resolution
        side = res // 2 ** (stage + 1)
        return (family_info(self.family).stage_channels[stage - 1], side, side)

    def pyramid_shapes(self, resolution: int | None = None) -> list[tuple[int, int, int]]:
        return [self.stage_shape(k, resolution) for k in self.stages_used]


@dataclass
class FeaturePyramid:
    """Per-stage feature tensors, ordered shallow to deep."""

    levels: list[torch.Tensor]
    stage_ids: tuple[int, ...]
    source: str = "teacher"

    def __post_init__(self) -> None:
        if len(self.levels) != len(self.stage_ids):
            raise ShapeError(f"{len(self.levels)} levels but {len(self.stage_ids)} stage ids")
        if self.source not in ("teacher", "student"):
            raise ValueError(f"source must be 'teacher' or 'student', got {self.source!r}")

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(f.shape[1:]) for f in self.levels]

    def level(self, stage: int) -> torch.Tensor:
        return self.levels[self.stage_ids.index(stage)]


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer, in name order."""
    h = hashlib.sha256()
    tensors = dict(module.named_parameters())
    tensors.update(module.named_buffers())
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def weights_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_DIR_ENV, DEFAULT_WEIGHTS_DIR)).expanduser()


def _resolve_weight_file(spec: BackboneSpec) -> Path:
    if spec.weights_source == "cache":
        root = weights_dir()
        hits = sorted(glob.glob(str(root / f"{spec.family}.*.bin")))
        if not hits:
            raise ConfigError(
                f"no weight file {spec.family}.<digest>.bin in {root}; set ${WEIGHTS_DIR_ENV} "
                "or use weights_source='random' for untrained runs"
            )
        path = Path(hits[0])
        expected = path.name[len(spec.family) + 1 : -len(".bin")]
        actual = file_sha256(path)
        if not actual.startswith(expected):
            raise ConfigError(f"digest mismatch for {path}: file hashes to {actual[:len(expected)]}")
        return path
    path = Path(spec.weights_source).expanduser()
    if not path.is_file():
        raise ConfigError(f"weight file not found: {path}")
    return path


CALIBRATION_BATCHES = 2
CALIBRATION_SHAPE = (16, 3, 128, 128)


def calibrate_batchnorm(net: nn.Module, generator: torch.Generator) -> None:
    """Replace the identity batch-norm statistics of a fresh network with noise statistics.

    A freshly initialised network normalises nothing in eval mode, so its ReLU
    features carry a large shared offset and cosine distances are dominated by
    zero-padding effects at the image border. A few forward passes over
    standard-normal images (what normalised inputs look like on average) give
    centred, unit-scale features. The input is data-independent, so the teacher
    still depends only on the seed.
    """
    bns = [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average over the calibration batches
    net.train()
    with torch.no_grad():
        for _ in range(CALIBRATION_BATCHES):
            net(torch.randn(*CALIBRATION_SHAPE, generator=generator))
    for bn in bns:
        bn.momentum = 0.1
    net.eval()


def build_resnet(spec: BackboneSpec) -> nn.Module:
    """Build the full torchvision classifier for ``spec`` with its weights loaded."""
    info = family_info(spec.family)
    source = spec.weights_source
    if source == "random" or source.startswith("random:"):
        seed = int(source.split(":", 1)[1]) if ":" in source else 0
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = getattr(models, info.constructor)(weights=None)
        calibrate_batchnorm(net, torch.Generator().manual_seed(seed))
        return net
    if source == "torchvision":
        try:
            return getattr(models, info.constructor)(weights="DEFAULT")
        except Exception as exc:  # network or cache failure
            raise ConfigError(f"could not obtain torchvision weights for {spec.family}: {exc}") from exc

    path = _resolve_weight_file(spec)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConfigError(f"unreadable weight file {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    net = getattr(models, info.constructor)(weights=None)
    if not any(k.startswith("fc.") for k in state):
        net.fc = nn.Identity()
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"weight file {path} does not match {spec.family}: {exc}") from exc
    return net


class TeacherEncoder(nn.Module):
    """Stem plus residual stages 1..3."""

    def __init__(self, net: nn.Module) -> None:
        super().__init__()
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3])

    def train(self, mode: bool = True) -> "TeacherEncoder":
        # BN running statistics must never update.
        return super().train(False)

    def forward(self, x: torch.Tensor, stages: Sequence[int]) -> list[torch.Tensor]:
        out = []
        x = self.stem(x)
        for k, stage in enumerate(self.stages, start=1):
            if k > max(stages):
                break
            x = stage(x)
            if k in stages:
                out.append(x)
        return out


@dataclass
class TeacherHandle:
    """A loaded, frozen teacher. Treat as read-only.

    ``stage4`` is the network's frozen fourth stage, only kept when requested
    (frozen-bottleneck ablation). It is not part of ``digest``.
    """

    spec: BackboneSpec
    encoder: TeacherEncoder
    digest: str
    stage4: nn.Module | None = None
    stage_channels: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        self.stage_channels = self.spec.stage_channels

    def to(self, device: torch.device | str) -> "TeacherHandle":
        self.encoder.to(device)
        if self.stage4 is not None:
            self.stage4.to(device)
        return self

    @property
    def device(self) -> torch.device:
        return next(self.encoder.parameters()).device

    def current_digest(self) -> str:
        return parameter_digest(self.encoder)

    def parameters(self):
        return self.encoder.parameters()


def load_teacher(spec: BackboneSpec, keep_stage4: bool = False) -> TeacherHandle:
    """Build the frozen teacher for ``spec`` and record its parameter digest.

    Raises:
        ConfigError: unknown family, or weights that are missing or do not fit.
    """
    family_info(spec.family)
    net = build_resnet(spec)
    encoder = TeacherEncoder(net)
    stage4 = net.layer4 if keep_stage4 else None
    for module in (encoder, stage4):
        if module is not None:
            module.requires_grad_(False)
            module.eval()
    digest = parameter_digest(encoder)
    logger.info("loaded teacher %s from %s (digest %s)", spec.family, spec.weights_source, digest[:12])
    return TeacherHandle(spec=spec, encoder=encoder, digest=digest, stage4=stage4)


def check_input(batch: torch.Tensor, resolution: int | None) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected a B x 3 x R x R batch, got shape {tuple(batch.shape)}")
    h, w = batch.shape[-2:]
    if h != w or h % 32:
        raise ShapeError(f"input must be square with side a multiple of 32, got {h}x{w}")
    if resolution is not None and h != resolution:
        raise ShapeError(f"input resolution {h} does not match configured resolution {resolution}")


def extract_features(
    handle: TeacherHandle, batch: torch.Tensor, allow_resolution_mismatch: bool = False
) -> FeaturePyramid:
    """Run the teacher and return one level per entry of ``stages_used``."""
    check_input(batch, None if allow_resolution_mismatch else handle.spec.input_resolution)
    with torch.no_grad():
        levels = handle.encoder(batch, handle.spec.stages_used)
    return FeaturePyramid(levels=levels, stage_ids=handle.spec.stages_used, source="teacher")
