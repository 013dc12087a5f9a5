"""Parameterized layers with explicit forward/backward passes.

Layers keep learnable state in :class:`Parameter` objects and everything
transient (im2col buffers, argmax maps, RReLU slopes) in the per-call
:class:`Context`, so one network can serve several forward calls as long as
each call owns its context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F


class Parameter:
    """A learnable array plus its gradient buffer.

    ``data`` stays ``None`` until :meth:`Module.initialize` runs; the shape is
    known up front so shape planning never allocates.
    """

    def __init__(self, shape, init="he", fan_in=None, value=0.0):
        self.shape = tuple(int(s) for s in shape)
        self.init = init
        self.fan_in = fan_in
        self.value = value
        self.data: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.requires_grad = True

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def allocate(self, rng, dtype=np.float32):
        if self.init == "he":
            std = math.sqrt(2.0 / self.fan_in)
            self.data = (rng.standard_normal(self.shape) * std).astype(dtype)
        else:
            self.data = np.full(self.shape, self.value, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.data is not None:
            self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


@dataclass
class Context:
    """Mode flags, randomness and backward caches for one forward call."""

    training: bool = False
    rng: np.random.Generator | None = None
    stochastic: bool | None = None
    update_stats: bool | None = None
    cache: dict = field(default_factory=dict)
    trace: dict | None = None

    def __post_init__(self):
        if self.stochastic is None:
            self.stochastic = self.training
        if self.update_stats is None:
            self.update_stats = self.training

    @classmethod
    def train(cls, rng):
        return cls(training=True, rng=rng)

    @classmethod
    def eval(cls):
        return cls(training=False)

    @classmethod
    def gradcheck(cls):
        # batch statistics (the path training differentiates) but a
        # deterministic RReLU and frozen running stats
        return cls(training=True, stochastic=False, update_stats=False)

    def record(self, module, shape):
        if self.trace is not None:
            self.trace[module.name] = tuple(shape)


class Module:
    """Minimal container: attributes that are Parameters or Modules register
    themselves in declaration order."""

    corrupt = False

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "name", "")

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, shape, value):
        self._buffers[key] = (tuple(shape), value)
        object.__setattr__(self, key, None)

    # -- traversal ---------------------------------------------------------

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for key, p in mod._params.items():
                yield (f"{mod_name}.{key}" if mod_name else key), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for key in mod._buffers:
                yield (f"{mod_name}.{key}" if mod_name else key), mod, key

    def assign_names(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            object.__setattr__(mod, "name", mod_name)
        return self

    # -- state -------------------------------------------------------------

    def initialize(self, rng, dtype=np.float32):
        for _, p in self.named_parameters():
            p.allocate(rng, dtype)
        for _, mod, key in self.named_buffers():
            shape, value = mod._buffers[key]
            object.__setattr__(mod, key, np.full(shape, value, dtype=dtype))
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, mod, key in self.named_buffers():
            object.__setattr__(mod, key, getattr(mod, key).astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())

    def state_arrays(self):
        """Parameters then buffers, as ``(name, array)`` in declaration order."""
        out = [(n, p.data) for n, p in self.named_parameters()]
        out += [(n, getattr(mod, key)) for n, mod, key in self.named_buffers()]
        return out

    def load_state_arrays(self, arrays):
        params = dict(self.named_parameters())
        buffers = {n: (mod, key) for n, mod, key in self.named_buffers()}
        for name, arr in arrays:
            if name in params:
                p = params[name]
                if arr.shape != p.shape:
                    raise F.ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, copy=True)
                p.grad = np.zeros_like(p.data)
            elif name in buffers:
                mod, key = buffers[name]
                object.__setattr__(mod, key, np.array(arr, copy=True))
            else:
                raise KeyError(f"unknown state entry {name!r}")

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- interface ---------------------------------------------------------

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def backward(self, grad, ctx: Context):
        raise NotImplementedError

    def output_shape(self, shape):
        raise NotImplementedError

    def plan(self, shape, report):
        """Propagate a symbolic shape, appending rows to ``report``."""
        out = self.output_shape(shape)
        report.append((self.name, out, sum(p.size for p in self._params.values())))
        return out

    def __call__(self, x, ctx):
        return self.forward(x, ctx)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None,
                 dilation=1, bias=True):
        super().__init__()
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter((out_channels, in_channels, kernel_size, kernel_size),
                                init="he", fan_in=fan_in)
        self.bias = Parameter((out_channels,), init="const") if bias else None

    @property
    def geometry(self):
        return (self.k, self.stride, self.padding, self.dilation)

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        ho = F.conv_output_size(h, self.k, self.stride, self.padding, self.dilation)
        wo = F.conv_output_size(w, self.k, self.stride, self.padding, self.dilation)
        if ho < 1 or wo < 1:
            raise F.ShapeError(f"{self.name}: non-positive output size for input {h}x{w}")
        return (n, self.out_channels, ho, wo)

    def forward(self, x, ctx):
        b = self.bias.data if self.bias is not None else None
        y, cols = F.conv2d_forward_cols(x, self.weight.data, b, self.stride, self.padding,
                                        self.dilation)
        ctx.cache[self] = (x.shape, cols)
        ctx.record(self, y.shape)
        return y

    def backward(self, grad, ctx, need_input_grad=True):
        x_shape, cols = ctx.cache.pop(self)
        gx, gw, gb = F.conv2d_backward_cols(x_shape, cols, self.weight.data, grad, self.stride,
                                            self.padding, self.dilation, need_input_grad)
        if self.corrupt:
            gw = gw * 1.5
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter((channels,), init="const", value=1.0)
        self.beta = Parameter((channels,), init="const", value=0.0)
        self.register_buffer("running_mean", (channels,), 0.0)
        self.register_buffer("running_var", (channels,), 1.0)

    def output_shape(self, shape):
        if shape[1] != self.channels:
            raise F.ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[1]}")
        return tuple(shape)

    def forward(self, x, ctx):
        # frozen layers keep their running statistics too
        update = ctx.update_stats and self.gamma.requires_grad
        y, cache = F.batchnorm_forward(x, self.gamma.data, self.beta.data, self.running_mean,
                                       self.running_var, ctx.training, self.eps, self.momentum,
                                       update)
        ctx.cache[self] = cache
        ctx.record(self, y.shape)
        return y

    def backward(self, grad, ctx):
        gx, gg, gb = F.batchnorm_backward(grad, self.gamma.data, ctx.cache.pop(self))
        if self.corrupt:
            gg = gg * 1.5
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        return gx


class RReLU(Module):
    def __init__(self, lower=F.RRELU_LOWER, upper=F.RRELU_UPPER):
        super().__init__()
        if not 0 < lower < upper < 1:
            raise ValueError(f"rrelu bounds must satisfy 0 < lower < upper < 1, got {lower}, {upper}")
        self.lower = lower
        self.upper = upper

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, ctx):
        y, slope = F.rrelu_forward(x, ctx.stochastic, ctx.rng, self.lower, self.upper)
        ctx.cache[self] = slope
        return y

    def backward(self, grad, ctx):
        g = F.rrelu_backward(ctx.cache.pop(self), grad)
        return g * 1.5 if self.corrupt else g


class ReLU(Module):
    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, ctx):
        ctx.cache[self] = x
        return F.relu(x)

    def backward(self, grad, ctx):
        g = F.relu_backward(ctx.cache.pop(self), grad)
        return g * 1.5 if self.corrupt else g


class MaxPool2d(Module):
    def __init__(self, k, s, padding=0):
        super().__init__()
        self.k = k
        self.stride = s
        self.padding = padding
        self.dilation = 1

    @property
    def geometry(self):
        return (self.k, self.stride, self.padding, 1)

    def output_shape(self, shape):
        n, c, h, w = shape
        if h + 2 * self.padding < self.k or w + 2 * self.padding < self.k:
            raise F.ShapeError(f"{self.name}: pool window {self.k} larger than input {h}x{w}")
        return (n, c, F.conv_output_size(h, self.k, self.stride, self.padding),
                F.conv_output_size(w, self.k, self.stride, self.padding))

    def forward(self, x, ctx):
        y, argmax = F.maxpool2d_forward(x, self.k, self.stride, self.padding)
        ctx.cache[self] = (x.shape, argmax)
        ctx.record(self, y.shape)
        return y

    def backward(self, grad, ctx):
        x_shape, argmax = ctx.cache.pop(self)
        g = F.maxpool2d_backward(x_shape, argmax, grad, self.k, self.stride, self.padding)
        return g * 1.5 if self.corrupt else g


class Upsample(Module):
    def __init__(self, factor=2):
        super().__init__()
        if factor < 1:
            raise ValueError(f"upsampling factor must be >= 1, got {factor}")
        self.factor = factor

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, h * self.factor, w * self.factor)

    def forward(self, x, ctx):
        y = F.upsample_nearest(x, self.factor)
        ctx.record(self, y.shape)
        return y

    def backward(self, grad, ctx):
        g = F.upsample_nearest_backward(grad, self.factor)
        return g * 1.5 if self.corrupt else g


class GlobalAvgPool(Module):
    def output_shape(self, shape):
        return (shape[0], shape[1], 1, 1)

    def forward(self, x, ctx):
        ctx.cache[self] = x.shape
        return F.global_avg_pool(x)

    def backward(self, grad, ctx):
        return F.global_avg_pool_backward(ctx.cache.pop(self), grad)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = []
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
            self.layers.append(layer)

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def plan(self, shape, report):
        for layer in self.layers:
            shape = layer.plan(shape, report)
        return shape

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, grad, ctx):
        for layer in reversed(self.layers):
            grad = layer.backward(grad, ctx)
        return grad


def conv_bn(in_ch, out_ch, k, stride=1, dilation=1, padding=None):
    """Conv (no bias, since BN follows) + BN."""
    return Sequential(Conv2d(in_ch, out_ch, k, stride, padding, dilation, bias=False),
                      BatchNorm2d(out_ch))


def conv_bn_act(in_ch, out_ch, k, stride=1, dilation=1, padding=None):
    return Sequential(Conv2d(in_ch, out_ch, k, stride, padding, dilation, bias=False),
                      BatchNorm2d(out_ch), RReLU())
