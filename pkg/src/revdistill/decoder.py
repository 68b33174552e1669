"""Student decoder: the teacher's residual stages run in reverse.

Each decoding stage opens with an upsampling residual block whose stride-2
convolutions (main path and shortcut) are 2x2 stride-2 transposed convolutions,
followed by ordinary residual blocks so that every stage has as many blocks as
its encoder counterpart. Stage 3 is decoded first, directly from the bottleneck
code, and decoding stops at stage-1 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torchvision.models.resnet import BasicBlock, Bottleneck, conv1x1, conv3x3

from revdistill.backbone import FeaturePyramid, family_info
from revdistill.errors import ShapeError
from revdistill.ocbe import init_weights


def deconv2x2(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2, bias=False)


class UpBasicBlock(nn.Module):
    def __init__(self, inplanes: int, planes: int) -> None:
        super().__init__()
        self.conv1 = deconv2x2(inplanes, planes)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.upsample = nn.Sequential(deconv2x2(inplanes, planes), nn.BatchNorm2d(planes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.upsample(x))


class UpBottleneck(nn.Module):
    def __init__(self, inplanes: int, planes: int, base_width: int = 64) -> None:
        super().__init__()
        width = int(planes * (base_width / 64.0))
        out = planes * Bottleneck.expansion
        self.conv1 = conv1x1(inplanes, width)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = deconv2x2(width, width)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = conv1x1(width, out)
        self.bn3 = nn.BatchNorm2d(out)
        self.relu = nn.ReLU(inplace=True)
        self.upsample = nn.Sequential(deconv2x2(inplanes, out), nn.BatchNorm2d(out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.upsample(x))


def decoding_stage(family: str, stage: int, inplanes: int) -> nn.Sequential:
    info = family_info(family)
    out = info.stage_channels[stage - 1]
    nblocks = info.blocks_per_stage[stage - 1]
    if info.block == "basic":
        blocks: list[nn.Module] = [UpBasicBlock(inplanes, out)]
        blocks += [BasicBlock(out, out) for _ in range(1, nblocks)]
    else:
        planes = out // Bottleneck.expansion
        bw = info.width_per_group
        blocks = [UpBottleneck(inplanes, planes, base_width=bw)]
        blocks += [Bottleneck(out, planes, base_width=bw) for _ in range(1, nblocks)]
    return nn.Sequential(*blocks)


@dataclass(frozen=True)
class DecoderSpec:
    backbone_family: str
    stages_emitted: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages_emitted", tuple(sorted(self.stages_emitted)))
        family_info(self.backbone_family)
        if not self.stages_emitted or any(k not in (1, 2, 3) for k in self.stages_emitted):
            raise ShapeError(f"stages_emitted must be a non-empty subset of (1, 2, 3): {self.stages_emitted}")


class StudentDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec) -> None:
        super().__init__()
        self.spec = spec
        widths = family_info(spec.backbone_family).stage_channels
        self.code_channels = widths[3]
        self.decode_order = tuple(range(3, min(spec.stages_emitted) - 1, -1))
        stages = {}
        inplanes = widths[3]
        for k in self.decode_order:
            stages[f"stage{k}"] = decoding_stage(spec.backbone_family, k, inplanes)
            inplanes = widths[k - 1]
        self.stages = nn.ModuleDict(stages)
        init_weights(self)

    def forward(self, code: torch.Tensor) -> FeaturePyramid:
        if code.ndim != 4 or code.shape[1] != self.code_channels:
            raise ShapeError(f"bottleneck code must be B x {self.code_channels} x H x W, got {tuple(code.shape)}")
        outputs = {}
        x = code
        for k in self.decode_order:
            x = self.stages[f"stage{k}"](x)
            if k in self.spec.stages_emitted:
                outputs[k] = x
        stage_ids = self.spec.stages_emitted
        return FeaturePyramid([outputs[k] for k in stage_ids], stage_ids, source="student")


def build_decoder(spec: DecoderSpec) -> StudentDecoder:
    return StudentDecoder(spec)


def decode(decoder: StudentDecoder, code: torch.Tensor, teacher: FeaturePyramid | None = None) -> FeaturePyramid:
    """Decode ``code`` into a student pyramid ordered shallow to deep.

    When ``teacher`` is given, shapes are checked level by level and the first
    mismatching stage is named in the error.
    """
    student = decoder(code)
    if teacher is not None:
        check_mirror(teacher, student)
    return student


def check_mirror(teacher: FeaturePyramid, student: FeaturePyramid) -> None:
    if teacher.stage_ids != student.stage_ids:
        raise ShapeError(f"stage ids differ: teacher {teacher.stage_ids}, student {student.stage_ids}")
    for k, ft, fs in zip(teacher.stage_ids, teacher.levels, student.levels):
        if ft.shape != fs.shape:
            raise ShapeError(f"stage {k}: teacher shape {tuple(ft.shape)} != student shape {tuple(fs.shape)}")
