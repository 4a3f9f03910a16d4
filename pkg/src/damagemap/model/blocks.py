"""Encoder building blocks: residual, SE bottleneck and dual-path."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn(in_ch: int, out_ch: int, kernel: int, stride: int = 1, groups: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
        nn.BatchNorm2d(out_ch),
    )


def fit_groups(groups: int, channels: int) -> int:
    """Largest group count <= ``groups`` that divides ``channels``."""
    return math.gcd(max(1, groups), channels)


class Shortcut(nn.Module):
    """Identity, or pointwise conv + BN when the shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.proj = conv_bn(in_ch, out_ch, 1, stride) if (in_ch != out_ch or stride != 1) else None

    def forward(self, x):
        return x if self.proj is None else self.proj(x)


class ResNetBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv_bn(in_channels, out_channels, 3, stride)
        self.conv2 = conv_bn(out_channels, out_channels, 3)
        self.shortcut = Shortcut(in_channels, out_channels, stride)
        self.out_channels = out_channels

    def forward(self, x):
        if x.shape[1] != self.conv1[0].in_channels:
            raise ValueError(f"expected {self.conv1[0].in_channels} input channels, got {x.shape[1]}")
        y = F.relu(self.conv1(x))
        y = self.conv2(y)
        return F.relu(y + self.shortcut(x))


class SEModule(nn.Module):
    """Squeeze-and-excite channel gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, math.ceil(channels / reduction))
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3))
        s = F.relu(self.fc1(s))
        return torch.sigmoid(self.fc2(s))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class BottleneckSEBlock(nn.Module):
    """Pointwise-reduce, 3x3, pointwise, SE gate, residual sum.

    ``seresnext``: in -> w -> w -> 4w (grouped 3x3 keeps width, last 1x1 expands).
    ``senet``:     in -> w -> 4w -> 4w (3x3 expands, last 1x1 keeps width).
    """

    def __init__(self, in_channels: int, width: int, stride: int = 1, kind: str = "seresnext",
                 groups: int = 32, reduction: int = 16):
        super().__init__()
        if kind not in ("seresnext", "senet"):
            raise ValueError(f"unknown bottleneck kind {kind!r}")
        mid = width if kind == "seresnext" else 4 * width
        out = 4 * width
        g = fit_groups(groups, width)
        self.kind = kind
        self.channel_trace = (in_channels, width, mid, out)
        self.conv1 = conv_bn(in_channels, width, 1)
        self.conv2 = conv_bn(width, mid, 3, stride, groups=g)
        self.conv3 = conv_bn(mid, out, 1)
        self.se = SEModule(out, reduction)
        self.shortcut = Shortcut(in_channels, out, stride)
        self.out_channels = out

    def forward(self, x):
        y = F.relu(self.conv1(x))
        y = F.relu(self.conv2(y))
        y = self.se(self.conv3(y))
        return F.relu(y + self.shortcut(x))


class DPNBlock(nn.Module):
    """Dual-path block over a (residual, dense) pair.

    The bottleneck sees ``cat(res, dense)`` and emits ``res_channels + growth``
    channels, split into a residual update and a dense extension. With
    ``project`` the incoming pair is first re-based by a strided pointwise
    conv into ``res_channels + dense_init`` channels (used at stage entry).
    """

    def __init__(self, in_channels: int, res_channels: int, growth: int, width: int, stride: int = 1,
                 groups: int = 32, project: bool = False, dense_init: int = 0):
        super().__init__()
        self.res_channels = res_channels
        self.growth = growth
        self.dense_init = dense_init
        self.project = conv_bn(in_channels, res_channels + dense_init, 1, stride) if project else None
        g = fit_groups(groups, width)
        self.conv1 = conv_bn(in_channels, width, 1)
        self.conv2 = conv_bn(width, width, 3, stride, groups=g)
        self.conv3 = conv_bn(width, res_channels + growth, 1)
        self.in_channels = in_channels

    def forward(self, res: torch.Tensor, dense: torch.Tensor):
        if res.shape[2:] != dense.shape[2:]:
            raise ValueError("residual and dense inputs are not spatially aligned")
        x = torch.cat([res, dense], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if self.project is not None:
            base_res, base_dense = torch.split(self.project(x), [self.res_channels, self.dense_init], dim=1)
        else:
            if res.shape[1] != self.res_channels:
                raise ValueError(f"residual width {res.shape[1]} != configured {self.res_channels}")
            base_res, base_dense = res, dense
        y = F.relu(self.conv1(x))
        y = F.relu(self.conv2(y))
        a, b = torch.split(self.conv3(y), [self.res_channels, self.growth], dim=1)
        return F.relu(base_res + a), torch.cat([base_dense, F.relu(b)], dim=1)
