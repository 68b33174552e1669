"""Trainable one-class bottleneck embedding.

Fusion: every teacher level is brought down to stage-3 resolution by stacks of
3x3 stride-2 conv/BN/ReLU units (two for stage 1, one for stage 2, none for
stage 3), concatenated on the channel axis and mixed by a 1x1 conv/BN/ReLU.
Embedding: a freshly initialised copy of the backbone's fourth residual stage
turns the fused tensor into the bottleneck code.

``variant`` selects the ablation arm:

``"mff_oce"``
    fusion followed by the trainable embedding stage (default);
``"oce"``
    trainable embedding stage applied to the stage-3 feature alone;
``"pre"``
    the teacher's own stage 4, frozen, applied to the stage-3 feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torchvision.models.resnet import BasicBlock, Bottleneck

from revdistill.backbone import FeaturePyramid, TeacherHandle, family_info
from revdistill.errors import ConfigError, ShapeError

VARIANTS = ("mff_oce", "oce", "pre")


@dataclass(frozen=True)
class OcbeConfig:
    backbone_family: str
    stages_used: tuple[int, ...] = (1, 2, 3)
    variant: str = "mff_oce"
    bottleneck_stride: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages_used", tuple(self.stages_used))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown OCBE variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "mff_oce" and 3 not in self.stages_used:
            raise ConfigError(f"variant {self.variant!r} embeds the stage-3 feature; stage 3 must be used")
        if self.bottleneck_stride != 2:
            raise ConfigError("bottleneck_stride is fixed at 2 by the stage-4 embedding block")

    @property
    def fused_channels(self) -> int:
        widths = family_info(self.backbone_family).stage_channels
        if self.variant == "mff_oce":
            return sum(widths[k - 1] for k in self.stages_used)
        return widths[2]

    @property
    def bottleneck_channels(self) -> int:
        return family_info(self.backbone_family).stage_channels[3]

    def code_shape(self, resolution: int) -> tuple[int, int, int]:
        side = resolution // 16 // self.bottleneck_stride
        return (self.bottleneck_channels, side, side)


def init_weights(module: nn.Module, zero_init_residual: bool = True) -> None:
    """Fan-out He init for convs, unit/zero BN affine.

    With ``zero_init_residual`` the last BN of every residual branch starts at
    zero so each block begins as its shortcut.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if zero_init_residual:
        for m in module.modules():
            if hasattr(m, "conv2") and (hasattr(m, "downsample") or hasattr(m, "upsample")):
                nn.init.zeros_((m.bn3 if hasattr(m, "bn3") else m.bn2).weight)


def conv_bn_relu(cin: int, cout: int, kernel: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def residual_stage(family: str, inplanes: int, stage: int, stride: int) -> nn.Sequential:
    """Encoder-style residual stage ``stage`` (1..4) of ``family`` taking ``inplanes`` channels."""
    info = family_info(family)
    out = info.stage_channels[stage - 1]
    nblocks = info.blocks_per_stage[stage - 1]
    if info.block == "basic":
        block, planes, kw = BasicBlock, out, {}
    else:
        block, planes, kw = Bottleneck, out // Bottleneck.expansion, {"base_width": info.width_per_group}
    downsample = None
    if stride != 1 or inplanes != out:
        downsample = nn.Sequential(
            nn.Conv2d(inplanes, out, 1, stride=stride, bias=False),
            nn.BatchNorm2d(out),
        )
    layers = [block(inplanes, planes, stride, downsample, **kw)]
    layers += [block(out, planes, **kw) for _ in range(1, nblocks)]
    return nn.Sequential(*layers)


class MultiScaleFusion(nn.Module):
    def __init__(self, family: str, stages: tuple[int, ...]) -> None:
        super().__init__()
        widths = family_info(family).stage_channels
        self.stages = stages
        self.align = nn.ModuleList()
        for k in stages:
            c = widths[k - 1]
            self.align.append(nn.Sequential(*[conv_bn_relu(c, c, 3, 2) for _ in range(3 - k)]))
        fused = sum(widths[k - 1] for k in stages)
        self.mix = conv_bn_relu(fused, fused, 1, 1)

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        if len({f.shape[0] for f in levels}) != 1:
            raise ShapeError(f"pyramid levels disagree on batch size: {[f.shape[0] for f in levels]}")
        aligned = [block(f) for block, f in zip(self.align, levels)]
        assert len({a.shape[-2:] for a in aligned}) == 1, "levels misaligned after downsampling"
        return self.mix(torch.cat(aligned, dim=1))


class OCBE(nn.Module):
    """Fusion + embedding. ``forward`` maps a teacher pyramid to the bottleneck code."""

    def __init__(self, cfg: OcbeConfig, teacher: TeacherHandle | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        if cfg.variant == "mff_oce":
            self.fuse = MultiScaleFusion(cfg.backbone_family, cfg.stages_used)
        else:
            self.fuse = None
        if cfg.variant == "pre":
            if teacher is None or teacher.stage4 is None:
                raise ConfigError("variant 'pre' needs a teacher loaded with keep_stage4=True")
            self.embed = teacher.stage4
        else:
            self.embed = residual_stage(cfg.backbone_family, cfg.fused_channels, stage=4, stride=2)
            init_weights(self)

    def train(self, mode: bool = True) -> "OCBE":
        super().train(mode)
        if self.cfg.variant == "pre":
            self.embed.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        if self.cfg.variant == "pre":
            return []
        return list(self.parameters())

    def fuse_levels(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if pyramid.stage_ids != self.cfg.stages_used:
            raise ShapeError(f"pyramid stages {pyramid.stage_ids} != configured {self.cfg.stages_used}")
        if self.fuse is None:
            return pyramid.level(3)
        return self.fuse(pyramid.levels)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.embed(self.fuse_levels(pyramid))


def build_ocbe(teacher: TeacherHandle, variant: str = "mff_oce") -> OCBE:
    cfg = OcbeConfig(teacher.spec.family, teacher.spec.stages_used, variant)
    return OCBE(cfg, teacher)


def mff_fuse(pyramid: FeaturePyramid, ocbe: OCBE) -> torch.Tensor:
    """Align and concatenate the pyramid at stage-3 resolution."""
    return ocbe.fuse_levels(pyramid)


def oce_embed(fused: torch.Tensor, ocbe: OCBE) -> torch.Tensor:
    """Condense a fused tensor to the bottleneck code (spatial size halved)."""
    if fused.shape[1] != ocbe.cfg.fused_channels:
        raise ShapeError(f"expected {ocbe.cfg.fused_channels} fused channels, got {fused.shape[1]}")
    return ocbe.embed(fused)
