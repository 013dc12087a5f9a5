"""Reusable architectural units: bottleneck, up-projection, ASPP, depth head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import functional as F
from .engine.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, Module, ReLU, RReLU, Sequential,
                            Upsample, conv_bn, conv_bn_act)


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.out_channels != 4 * self.mid_channels:
            raise ValueError(f"bottleneck out_channels must be 4*mid ({4 * self.mid_channels}), "
                             f"got {self.out_channels}")

    @property
    def has_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride > 1


@dataclass(frozen=True)
class UpProjSpec:
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("up-projection channel counts must be positive")

    def __str__(self):
        return f"[{self.in_channels}-{self.out_channels}]"


ASPP_RATES = (1, 3, 6, 12)


@dataclass(frozen=True)
class AsppSpec:
    in_channels: int
    branch_channels: int
    rates: tuple = ASPP_RATES

    def __post_init__(self):
        if tuple(self.rates) != ASPP_RATES:
            raise ValueError(f"ASPP dilation rates are fixed to {ASPP_RATES}, got {self.rates}")

    @property
    def n_branches(self) -> int:
        # one per rate plus the image-pooling branch
        return len(self.rates) + 1

    @property
    def out_channels(self) -> int:
        return self.n_branches * self.branch_channels


class Bottleneck(Module):
    """1x1 -> 3x3 (stride, dilation) -> 1x1 residual block with RReLU."""

    def __init__(self, spec: BottleneckSpec):
        super().__init__()
        self.spec = spec
        s = spec
        self.reduce = conv_bn_act(s.in_channels, s.mid_channels, 1)
        self.spatial = conv_bn_act(s.mid_channels, s.mid_channels, 3, stride=s.stride,
                                   dilation=s.dilation)
        self.expand = conv_bn(s.mid_channels, s.out_channels, 1)
        self.shortcut = conv_bn(s.in_channels, s.out_channels, 1, stride=s.stride) \
            if s.has_projection else None
        self.act = RReLU()

    def chain(self):
        """Main-path layer geometry ``(k, s, p, d)`` for receptive-field analysis."""
        return [self.reduce.layers[0].geometry, self.spatial.layers[0].geometry,
                self.expand.layers[0].geometry]

    def output_shape(self, shape):
        if shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {shape[1]}")
        return self.expand.output_shape(self.spatial.output_shape(self.reduce.output_shape(shape)))

    def plan(self, shape, report):
        if shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {shape[1]}")
        out = self.expand.plan(self.spatial.plan(self.reduce.plan(shape, report), report), report)
        if self.shortcut is not None:
            self.shortcut.plan(shape, report)
        return self.act.plan(out, report)

    def forward(self, x, ctx):
        if x.shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {x.shape[1]}")
        y = self.expand(self.spatial(self.reduce(x, ctx), ctx), ctx)
        y = y + (self.shortcut(x, ctx) if self.shortcut is not None else x)
        return self.act(y, ctx)

    def backward(self, grad, ctx):
        g = self.act.backward(grad, ctx)
        gx = self.reduce.backward(self.spatial.backward(self.expand.backward(g, ctx), ctx), ctx)
        if self.shortcut is not None:
            return gx + self.shortcut.backward(g, ctx)
        return gx + g


class UpProjection(Module):
    """x2 nearest-neighbour upsampling followed by a two-branch residual unit.

    Main branch: 5x5 conv -> BN -> RReLU -> 3x3 conv -> BN.
    Projection branch: 5x5 conv -> BN.  Output: RReLU(main + projection).
    """

    def __init__(self, spec: UpProjSpec):
        super().__init__()
        self.spec = spec
        ni, no = spec.in_channels, spec.out_channels
        self.up = Upsample(2)
        self.main = Sequential(Conv2d(ni, no, 5, bias=False), BatchNorm2d(no), RReLU(),
                               Conv2d(no, no, 3, bias=False), BatchNorm2d(no))
        self.proj = conv_bn(ni, no, 5)
        self.act = RReLU()

    def output_shape(self, shape):
        return self.main.output_shape(self.up.output_shape(shape))

    def plan(self, shape, report):
        if shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {shape[1]}")
        up = self.up.plan(shape, report)
        out = self.main.plan(up, report)
        self.proj.plan(up, report)
        return self.act.plan(out, report)

    def forward(self, x, ctx):
        if x.shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {x.shape[1]}")
        u = self.up(x, ctx)
        return self.act(self.main(u, ctx) + self.proj(u, ctx), ctx)

    def backward(self, grad, ctx):
        g = self.act.backward(grad, ctx)
        gu = self.main.backward(g, ctx) + self.proj.backward(g, ctx)
        return self.up.backward(gu, ctx)


class ASPP(Module):
    """Atrous spatial pyramid: a 1x1 branch, 3x3 branches at dilations 3/6/12,
    and an image-pooling branch, each ending in BN + RReLU, concatenated."""

    def __init__(self, spec: AsppSpec):
        super().__init__()
        self.spec = spec
        ci, cb = spec.in_channels, spec.branch_channels
        self.branches = [conv_bn_act(ci, cb, 1)]
        for r in spec.rates[1:]:
            self.branches.append(conv_bn_act(ci, cb, 3, dilation=r))
        for i, b in enumerate(self.branches):
            setattr(self, f"rate{spec.rates[i]}", b)
        self.pool = GlobalAvgPool()
        self.image = conv_bn_act(ci, cb, 1)

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {c}")
        return (n, self.spec.out_channels, h, w)

    def plan(self, shape, report):
        self.output_shape(shape)
        for b in self.branches:
            b.plan(shape, report)
        self.image.plan(self.pool.plan(shape, report), report)
        out = self.output_shape(shape)
        report.append((f"{self.name}.concat", out, 0))
        return out

    def forward(self, x, ctx):
        if x.shape[1] != self.spec.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {x.shape[1]}")
        outs = [b(x, ctx) for b in self.branches]
        pooled = self.image(self.pool(x, ctx), ctx)
        outs.append(np.broadcast_to(pooled, pooled.shape[:2] + x.shape[2:]))
        y = F.concat_channels(outs)
        ctx.record(self, y.shape)
        return y

    def backward(self, grad, ctx):
        parts = F.split_channels(grad, [self.spec.branch_channels] * self.spec.n_branches)
        gx = self.pool.backward(self.image.backward(parts[-1].sum(axis=(2, 3), keepdims=True), ctx),
                                ctx)
        for b, g in zip(self.branches, parts[:-1]):
            gx = gx + b.backward(g, ctx)
        return gx


class DepthHead(Module):
    """3x3 same-size conv to one channel followed by ReLU."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = Conv2d(in_channels, 1, 3)
        self.act = ReLU()

    def output_shape(self, shape):
        return self.conv.output_shape(shape)

    def plan(self, shape, report):
        return self.act.plan(self.conv.plan(shape, report), report)

    def forward(self, x, ctx):
        return self.act(self.conv(x, ctx), ctx)

    def backward(self, grad, ctx):
        return self.conv.backward(self.act.backward(grad, ctx), ctx)
