"""Randomly initialized residual CNN and its saliency read-out.

A never-trained 50-layer bottleneck residual network runs over the xyz map;
the outputs of its three intermediate stages (1/4, 1/8, 1/16 resolution) are
channel-summed, normalized, fused into one activation map, and thresholded
into the top-tau interest mask. Every weight comes from He initialization
under a fixed seed, so the whole read-out is a deterministic function of
(seed, width multiplier, input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import imageops

BN_MODES = ("spatial", "running")


class _Norm(nn.Module):
    """Normalization at random init: per-channel spatial statistics of the
    single input, or untrained running statistics (an identity map)."""

    def __init__(self, mode: str):
        super().__init__()
        if mode not in BN_MODES:
            raise ValueError(f"unknown bn mode {mode!r}")
        self.mode = mode

    def forward(self, x):
        if self.mode == "running":
            return x
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + 1e-5)


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride, bn_mode):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = _conv(cin, planes, 1)
        self.n1 = _Norm(bn_mode)
        self.conv2 = _conv(planes, planes, 3, stride)
        self.n2 = _Norm(bn_mode)
        self.conv3 = _conv(planes, cout, 1)
        self.n3 = _Norm(bn_mode)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(_conv(cin, cout, 1, stride), _Norm(bn_mode))
        else:
            self.down = None

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.n1(self.conv1(x)))
        out = self.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        return self.relu(out + identity)


class RandResNet(nn.Module):
    """Bottleneck residual body (3-4-6-3 blocks) over 3-channel xyz input."""

    def __init__(self, width: float, bn_mode: str = "spatial"):
        super().__init__()
        if not 0 < width <= 1:
            raise ValueError(f"width multiplier {width} outside (0, 1]")
        ch = [max(1, int(round(c * width))) for c in (64, 64, 128, 256, 512)]
        self.stage_channels = [c * _Bottleneck.expansion for c in ch[1:]]
        self.stem = nn.Sequential(
            nn.Conv2d(3, ch[0], 7, stride=2, padding=3, bias=False),
            _Norm(bn_mode),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        cin = ch[0]
        layers = []
        for planes, blocks, stride in zip(ch[1:], (3, 4, 6, 3), (1, 2, 2, 2)):
            stage = []
            for b in range(blocks):
                stage.append(_Bottleneck(cin, planes, stride if b == 0 else 1, bn_mode))
                cin = planes * _Bottleneck.expansion
            layers.append(nn.Sequential(*stage))
        self.layer1, self.layer2, self.layer3, self.layer4 = layers

    def forward(self, x):
        x = self.stem(x)
        s1 = self.layer1(x)
        s2 = self.layer2(s1)
        s3 = self.layer3(s2)
        return s1, s2, s3


@dataclass(frozen=True)
class RandNetParams:
    net: RandResNet
    seed: int
    width: float
    bn_mode: str


def init_randnet(seed: int, width: float = 1.0, bn_mode: str = "spatial") -> RandNetParams:
    """He-initialized random network; deterministic in (seed, width)."""
    torch.manual_seed(int(seed))
    net = RandResNet(width, bn_mode)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                nn.init.trunc_normal_(m.weight, 0.0, std, a=-4 * std, b=4 * std)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return RandNetParams(net, int(seed), float(width), bn_mode)


def forward_stages(params: RandNetParams, pm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stage activations at 1/4, 1/8, 1/16 of the input resolution."""
    h, w = pm.height, pm.width
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} is not divisible by 32")
    x = torch.from_numpy(np.ascontiguousarray(pm.points.transpose(2, 0, 1))[None])
    with torch.no_grad():
        stages = params.net(x.float())
    return tuple(s[0].numpy().astype(np.float32) for s in stages)


def fuse_activations(stages, out_h: int, out_w: int) -> np.ndarray:
    """Channel-sum, per-stage min-max, upsample to the finest stage, average,
    then bilinear resize to the input resolution. Output values lie in [0, 1]."""
    if len(stages) != 3:
        raise ValueError("expected three stage maps")
    shapes = [s.shape[1:] for s in stages]
    for i in (1, 2):
        if shapes[i - 1] != (2 * shapes[i][0], 2 * shapes[i][1]):
            raise ValueError(f"stage shapes {shapes} do not halve between stages")
    fine_h, fine_w = shapes[0]
    acc = np.zeros((fine_h, fine_w), dtype=np.float64)
    for s in stages:
        summed = np.asarray(s, dtype=np.float64).sum(axis=0)
        normed = imageops.minmax01(summed)
        acc += imageops.resize_bilinear(normed, fine_h, fine_w)
    fused = acc / 3.0
    return imageops.resize_bilinear(fused, out_h, out_w)


def interest_mask(activation: np.ndarray, tau: float) -> np.ndarray:
    """Binary mask of the ceil(tau*H*W) largest activations; ties resolve in
    row-major pixel order."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau {tau} outside (0, 1]")
    a = np.asarray(activation, dtype=np.float64)
    count = int(math.ceil(tau * a.size))
    flat = a.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:count]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(a.shape)


def saliency(params: RandNetParams, pm, tau: float):
    """Full read-out: fused activation map and its top-tau interest mask."""
    stages = forward_stages(params, pm)
    fused = fuse_activations(stages, pm.height, pm.width)
    return fused, interest_mask(fused, tau)
