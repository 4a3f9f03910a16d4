"""Siamese U-Net: shared encoder/decoder per image, pointwise fusion head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BottleneckSEBlock, DPNBlock, ResNetBlock, conv_bn

NUM_STAGES = 5


class EncoderKind(str, Enum):
    RESNET = "resnet"
    SERESNEXT = "seresnext"
    SENET = "senet"
    DPN = "dpn"


@dataclass
class ModelConfig:
    """Stage widths are base widths: ResNet stages output ``w``, bottleneck kinds ``4w``."""

    encoder: EncoderKind = EncoderKind.RESNET
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1, 1)
    num_classes: int = 3
    se_reduction: int = 16
    groups: Optional[int] = None  # None: 32 for seresnext/dpn, 1 for senet
    dpn_growth: Optional[tuple[int, ...]] = None  # None: a quarter of the residual width
    decoder_channels: Optional[tuple[int, ...]] = None  # None: halve per stage
    in_channels: int = 3

    def __post_init__(self):
        self.encoder = EncoderKind(self.encoder)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"stage_channels needs {NUM_STAGES} entries, got {len(self.stage_channels)}")
        if len(self.blocks_per_stage) != NUM_STAGES or min(self.blocks_per_stage) < 1:
            raise ValueError(f"blocks_per_stage needs {NUM_STAGES} positive entries")
        if self.num_classes not in (2, 3, 4):
            raise ValueError(f"num_classes must be 2, 3 or 4, got {self.num_classes}")
        if self.dpn_growth is not None:
            self.dpn_growth = tuple(int(g) for g in self.dpn_growth)
        if self.decoder_channels is not None:
            self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
            if len(self.decoder_channels) != NUM_STAGES:
                raise ValueError(f"decoder_channels needs {NUM_STAGES} entries")

    @property
    def group_count(self) -> int:
        if self.groups is not None:
            return self.groups
        return 1 if self.encoder == EncoderKind.SENET else 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, encoder="resnet", num_classes: int = 3) -> "ModelConfig":
        return cls(encoder=encoder, stage_channels=(4, 8, 8, 8, 8), num_classes=num_classes)

    @classmethod
    def full_scale(cls, encoder="resnet", num_classes: int = 3) -> "ModelConfig":
        return cls(encoder=encoder, stage_channels=(64, 64, 128, 256, 512), blocks_per_stage=(1, 3, 4, 6, 3),
                   num_classes=num_classes)


class Encoder(nn.Module):
    """Stride-2 stem, five block stages, max-pool between stages 1 and 2,
    stride-2 first blocks in stages 3-5. Returns the five stage outputs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.encoder
        widths = cfg.stage_channels
        self.stem = nn.Sequential(conv_bn(cfg.in_channels, widths[0], 7, stride=2), nn.ReLU(inplace=True))
        self.pool = nn.MaxPool2d(2)
        self.stages = nn.ModuleList()
        self.out_channels: list[int] = []
        prev = widths[0]
        dense_prev = 0
        for i, (w, n) in enumerate(zip(widths, cfg.blocks_per_stage)):
            stride = 2 if i >= 2 else 1
            blocks = nn.ModuleList()
            if self.kind == EncoderKind.RESNET:
                for j in range(n):
                    blocks.append(ResNetBlock(prev if j == 0 else w, w, stride if j == 0 else 1))
                prev = w
            elif self.kind in (EncoderKind.SERESNEXT, EncoderKind.SENET):
                for j in range(n):
                    blocks.append(BottleneckSEBlock(prev if j == 0 else 4 * w, w, stride if j == 0 else 1,
                                                    kind=self.kind.value, groups=cfg.group_count,
                                                    reduction=cfg.se_reduction))
                prev = 4 * w
            else:
                res_ch = 4 * w
                dense_init = max(1, res_ch // 4)
                growth = cfg.dpn_growth[i] if cfg.dpn_growth is not None else dense_init
                in_ch = prev + dense_prev
                for j in range(n):
                    blocks.append(DPNBlock(in_ch, res_ch, growth, w, stride if j == 0 else 1,
                                           groups=cfg.group_count, project=(j == 0), dense_init=dense_init))
                    in_ch = res_ch + dense_init + (j + 1) * growth
                prev, dense_prev = res_ch, dense_init + n * growth
            self.stages.append(blocks)
            self.out_channels.append(prev + dense_prev)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        feats = []
        if self.kind == EncoderKind.DPN:
            res, dense = x, x[:, :0]
            for i, stage in enumerate(self.stages):
                if i == 1:
                    res, dense = self.pool(res), self.pool(dense)
                for blk in stage:
                    res, dense = blk(res, dense)
                feats.append(torch.cat([res, dense], dim=1))
            return feats
        for i, stage in enumerate(self.stages):
            if i == 1:
                x = self.pool(x)
            for blk in stage:
                x = blk(x)
            feats.append(x)
        return feats


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


class DecoderStage(nn.Module):
    """Nearest 2x upsample, concat skip (if any), 3x3 conv, ReLU."""

    def __init__(self, deep_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(deep_channels + skip_channels, out_channels, 3, padding=1)
        self.skip_channels = skip_channels

    def forward(self, deep: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        up = upsample2x(deep)
        if skip is not None:
            if skip.shape[2:] != up.shape[2:]:
                raise ValueError(f"skip size {tuple(skip.shape[2:])} != 2x deep size {tuple(up.shape[2:])}")
            up = torch.cat([up, skip], dim=1)
        return F.relu(self.conv(up))


class SiameseUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        enc = self.encoder.out_channels
        dec = cfg.decoder_channels or tuple(max(4, enc[-1] // 2 ** (i + 1)) for i in range(NUM_STAGES))
        self.decoder_channels = dec
        stages = []
        deep = enc[-1]
        # four skip stages (1/32 -> 1/2) and a final skip-less stage back to full resolution
        for i, skip in enumerate(list(reversed(enc[:-1])) + [0]):
            stages.append(DecoderStage(deep, skip, dec[i]))
            deep = dec[i]
        self.decoder = nn.ModuleList(stages)
        self.head = nn.Conv2d(2 * dec[-1], cfg.num_classes, 1)

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        """Per-image feature map at input resolution (shared weights)."""
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"input size {tuple(x.shape[-2:])} must be divisible by 32")
        feats = self.encoder(x)
        y = feats[-1]
        skips = list(reversed(feats[:-1])) + [None]
        for stage, skip in zip(self.decoder, skips):
            y = stage(y, skip)
        return y

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        if pre.shape != post.shape:
            raise ValueError(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
        return self.head(torch.cat([self.branch(pre), self.branch(post)], dim=1))

    def reset_head(self, num_classes: int, bound: float = 1e-3) -> None:
        self.head = nn.Conv2d(self.head.in_channels, num_classes, 1)
        nn.init.uniform_(self.head.weight, -bound, bound)
        nn.init.zeros_(self.head.bias)
        self.cfg.num_classes = num_classes


def build_model(cfg: ModelConfig) -> SiameseUNet:
    return SiameseUNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
