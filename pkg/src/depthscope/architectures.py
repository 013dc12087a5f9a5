"""The five encoder-decoder depth networks, a weight-free shape planner and
receptive-field arithmetic.

Architectures share a bottleneck encoder whose last stage(s) trade stride for
dilation:

* ``ssn``   encoder at 1/16, four up-projections, depth head
* ``skips`` as ssn, with mirror encoder taps concatenated before each up-projection
* ``fpo``   as skips, with a forked depth head after every up-projection
* ``msml``  encoder kept at 1/8; all taps pooled to 1/8 and concatenated; three up-projections
* ``dsp``   as ssn, with an ASPP block between encoder and decoder
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_streams
from .blocks import (ASPP, AsppSpec, Bottleneck, BottleneckSpec, DepthHead, UpProjection,
                     UpProjSpec)
from .engine import functional as F
from .engine.layers import Context, MaxPool2d, Module, Sequential, conv_bn_act

ARCHS = ("ssn", "skips", "fpo", "msml", "dsp")

BASE_WIDTHS = (64, 256, 512, 1024, 2048)
RESNET200_BLOCKS = (3, 24, 36, 3)

# decoder up-projection lists at full width, one row per architecture
TABLE1 = {
    "ssn": ["[2048-1024]", "[1024-512]", "[512-256]", "[256-64]"],
    "skips": ["[3072-1024]", "[1536-512]", "[768-256]", "[320-64]"],
    "fpo": ["[3072-1024]", "[1536-512]", "[768-256]", "[320-64]"],
    "msml": ["[3904-512]", "[512-256]", "[256-64]"],
    "dsp": ["[2560-1024]", "[1024-512]", "[512-256]", "[256-64]"],
}


def _round4(x: float) -> int:
    return 4 * max(1, int(round(x / 4)))


@dataclass
class NetworkSpec:
    arch: str = "ssn"
    blocks_per_stage: tuple = (2, 2, 2, 2)
    omega: float = 1.0
    input_size: tuple = (240, 320)  # (height, width)
    seed: int = 0

    def __post_init__(self):
        self.arch = self.arch.lower()
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError(f"blocks_per_stage needs 4 positive ints, got {self.blocks_per_stage}")
        if not 0 < self.omega <= 1:
            raise ValueError(f"channel multiplier must be in (0, 1], got {self.omega}")

    @property
    def widths(self) -> tuple:
        """(stem, stage1, stage2, stage3, stage4) channel counts."""
        stem = max(1, int(round(BASE_WIDTHS[0] * self.omega)))
        return (stem,) + tuple(_round4(w * self.omega) for w in BASE_WIDTHS[1:])

    @property
    def aspp_branch_channels(self) -> int:
        return _round4(512 * self.omega)

    @property
    def encoder_scale(self) -> int:
        return 8 if self.arch == "msml" else 16

    def to_dict(self):
        d = asdict(self)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        d["input_size"] = list(self.input_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("arch", "blocks_per_stage", "omega", "input_size", "seed")
                      if k in d})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# encoder


def stage_specs(spec: NetworkSpec, dilated: bool = True):
    """Bottleneck specs per stage.

    A stage that gives up its stride dilates every block after the first; the
    first block keeps the previous dilation so the receptive field matches the
    strided original exactly.
    """
    widths = spec.widths
    if not dilated:
        plan = [(1, 1), (2, 1), (2, 1), (2, 1)]
    elif spec.arch == "msml":
        plan = [(1, 1), (2, 1), (1, 2), (1, 4)]
    else:
        plan = [(1, 1), (2, 1), (2, 1), (1, 2)]
    stages = []
    prev_dilation = 1
    in_ch = widths[0]
    for idx, (stride, dilation) in enumerate(plan):
        out_ch = widths[idx + 1]
        blocks = []
        for b in range(spec.blocks_per_stage[idx]):
            d = prev_dilation if b == 0 else dilation
            s = stride if b == 0 else 1
            blocks.append(BottleneckSpec(in_ch if b == 0 else out_ch, out_ch // 4, out_ch, s, d))
        stages.append(blocks)
        prev_dilation = dilation
        in_ch = out_ch
    return stages


TAPS = ("stem", "pool", "stage1", "stage2", "stage3", "stage4")


class Encoder(Module):
    """Stem (7x7/2 conv + 3x3/2 max-pool) followed by four bottleneck stages."""

    def __init__(self, spec: NetworkSpec, dilated: bool = True):
        super().__init__()
        self.spec = spec
        c0 = spec.widths[0]
        self.stem = conv_bn_act(3, c0, 7, stride=2, padding=3)
        self.pool = MaxPool2d(3, 2, padding=1)
        self.stages = []
        for i, blocks in enumerate(stage_specs(spec, dilated)):
            stage = Sequential(*[Bottleneck(b) for b in blocks])
            setattr(self, f"stage{i + 1}", stage)
            self.stages.append(stage)

    def tap_channels(self):
        w = self.spec.widths
        return dict(zip(TAPS, (w[0], w[0], w[1], w[2], w[3], w[4])))

    def chains(self):
        """Main-path geometry ``(k, s, p, d)`` leading to each tap."""
        chain = [self.stem.layers[0].geometry]
        out = {"stem": list(chain)}
        chain.append(self.pool.geometry)
        out["pool"] = list(chain)
        for i, stage in enumerate(self.stages):
            for block in stage.layers:
                chain.extend(block.chain())
            out[f"stage{i + 1}"] = list(chain)
        return out

    def plan(self, shape, report):
        taps = {}
        taps["stem"] = shape = self.stem.plan(shape, report)
        taps["pool"] = shape = self.pool.plan(shape, report)
        for i, stage in enumerate(self.stages):
            taps[f"stage{i + 1}"] = shape = stage.plan(shape, report)
        return taps

    def forward(self, x, ctx):
        taps = {}
        taps["stem"] = x = self.stem(x, ctx)
        taps["pool"] = x = self.pool(x, ctx)
        for i, stage in enumerate(self.stages):
            taps[f"stage{i + 1}"] = x = stage(x, ctx)
        return taps

    def backward(self, grads, ctx):
        """``grads`` maps tap names to incoming gradients (missing = zero)."""
        g = None
        for i in reversed(range(len(self.stages))):
            g = _add(g, grads.get(f"stage{i + 1}"))
            if g is not None:
                g = self.stages[i].backward(g, ctx)
        g = _add(g, grads.get("pool"))
        if g is not None:
            g = self.pool.backward(g, ctx)
        g = _add(g, grads.get("stem"))
        if g is None:
            return None
        return self.stem.backward(g, ctx)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# ---------------------------------------------------------------------------
# networks


def decoder_specs(spec: NetworkSpec):
    c0, c1, c2, c3, c4 = spec.widths
    if spec.arch == "ssn":
        pairs = [(c4, c3), (c3, c2), (c2, c1), (c1, c0)]
    elif spec.arch in ("skips", "fpo"):
        pairs = [(c4 + c3, c3), (c3 + c2, c2), (c2 + c1, c1), (c1 + c0, c0)]
    elif spec.arch == "msml":
        pairs = [(c0 + c1 + c2 + c3 + c4, c2), (c2, c1), (c1, c0)]
    else:
        pairs = [(5 * spec.aspp_branch_channels, c3), (c3, c2), (c2, c1), (c1, c0)]
    return [UpProjSpec(ni, no) for ni, no in pairs]


class DepthNetwork(Module):
    """Encoder + up-projection decoder.  ``forward`` returns a list of depth
    maps ordered coarse to fine (a single map except for FPO)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.arch = spec.arch
        self.encoder = Encoder(spec)
        if spec.arch == "dsp":
            self.aspp = ASPP(AsppSpec(spec.widths[4], spec.aspp_branch_channels))
        if spec.arch == "msml":
            self.mid_pool_a = MaxPool2d(2, 2)
            self.mid_pool_b = MaxPool2d(2, 2)
        self.ups = []
        for i, up_spec in enumerate(decoder_specs(spec)):
            up = UpProjection(up_spec)
            setattr(self, f"up{i + 1}", up)
            self.ups.append(up)
        if spec.arch == "fpo":
            self.heads = []
            for i, up in enumerate(self.ups):
                head = DepthHead(up.spec.out_channels)
                setattr(self, f"head{i + 1}", head)
                self.heads.append(head)
        else:
            self.head = DepthHead(self.ups[-1].spec.out_channels)
            self.heads = [self.head]
        self.assign_names()

    @property
    def n_outputs(self) -> int:
        return len(self.heads)

    def decoder_list(self):
        return [str(up.spec) for up in self.ups]

    # skip sources consumed before each up-projection (skips/fpo)
    _SKIPS = ("stage3", "stage2", "stage1", "stem")

    def _check_input(self, shape):
        h, w = shape[2:]
        if shape[1] != 3:
            raise F.ShapeError(f"network expects 3 input channels, got {shape[1]}")
        if h % 16 or w % 16:
            raise F.ShapeError(f"input size {h}x{w} must be divisible by 16")

    def forward(self, x, ctx, n_outputs=None):
        """``n_outputs`` (FPO only) stops after that many scales."""
        self._check_input(x.shape)
        taps = self.encoder(x, ctx)
        limit = self.n_outputs if n_outputs is None else n_outputs
        outs = []
        if self.arch in ("skips", "fpo"):
            h = taps["stage4"]
            for i, up in enumerate(self.ups):
                h = up(F.concat_channels([h, taps[self._SKIPS[i]]]), ctx)
                if self.arch == "fpo":
                    outs.append(self.heads[i](h, ctx))
                    if len(outs) == limit:
                        return outs
            if self.arch == "skips":
                outs.append(self.head(h, ctx))
            return outs
        if self.arch == "msml":
            h = F.concat_channels([self.mid_pool_a(taps["pool"], ctx),
                                   self.mid_pool_b(taps["stage1"], ctx),
                                   taps["stage2"], taps["stage3"], taps["stage4"]])
        elif self.arch == "dsp":
            h = self.aspp(taps["stage4"], ctx)
        else:
            h = taps["stage4"]
        for up in self.ups:
            h = up(h, ctx)
        return [self.head(h, ctx)]

    def backward(self, grads, ctx, need_input_grad=True):
        """``grads`` is a list aligned with ``forward``'s outputs; ``None``
        entries contribute nothing.  Returns the input gradient (or ``None``
        when it is not needed and the encoder is frozen)."""
        if not isinstance(grads, (list, tuple)):
            grads = [grads]
        enc = self.encoder.tap_channels()
        tap_grads = {}
        if self.arch in ("skips", "fpo"):
            g = None
            n = len(grads)
            for i in reversed(range(len(self.ups))):
                if self.arch == "fpo":
                    if i < n and grads[i] is not None:
                        g = _add(g, self.heads[i].backward(grads[i], ctx))
                elif i == len(self.ups) - 1:
                    g = self.head.backward(grads[0], ctx)
                if g is None:
                    continue
                g = self.ups[i].backward(g, ctx)
                skip = self._SKIPS[i]
                g, gs = F.split_channels(g, [g.shape[1] - enc[skip], enc[skip]])
                tap_grads[skip] = _add(tap_grads.get(skip), gs)
            tap_grads["stage4"] = _add(tap_grads.get("stage4"), g)
        else:
            g = self.head.backward(grads[0], ctx)
            for up in reversed(self.ups):
                g = up.backward(g, ctx)
            if self.arch == "msml":
                parts = F.split_channels(g, [enc[t] for t in ("pool", "stage1", "stage2",
                                                              "stage3", "stage4")])
                tap_grads = {"pool": self.mid_pool_a.backward(parts[0], ctx),
                             "stage1": self.mid_pool_b.backward(parts[1], ctx),
                             "stage2": parts[2], "stage3": parts[3], "stage4": parts[4]}
            elif self.arch == "dsp":
                tap_grads["stage4"] = self.aspp.backward(g, ctx)
            else:
                tap_grads["stage4"] = g
        if not need_input_grad and not self.encoder.trainable:
            return None
        return self.encoder.backward(tap_grads, ctx)

    def plan(self, shape, report):
        self._check_input(shape)
        taps = self.encoder.plan(shape, report)
        outs = []
        if self.arch in ("skips", "fpo"):
            h = taps["stage4"]
            for i, up in enumerate(self.ups):
                h = _concat_shape([h, taps[self._SKIPS[i]]], f"concat{i + 1}", report)
                h = up.plan(h, report)
                if self.arch == "fpo":
                    outs.append(self.heads[i].plan(h, report))
            if self.arch == "skips":
                outs.append(self.head.plan(h, report))
            return taps, outs
        if self.arch == "msml":
            h = _concat_shape([self.mid_pool_a.plan(taps["pool"], report),
                               self.mid_pool_b.plan(taps["stage1"], report),
                               taps["stage2"], taps["stage3"], taps["stage4"]], "middle", report)
        elif self.arch == "dsp":
            h = self.aspp.plan(taps["stage4"], report)
        else:
            h = taps["stage4"]
        for up in self.ups:
            h = up.plan(h, report)
        return taps, [self.head.plan(h, report)]

    def predict(self, x):
        """Eval-mode forward returning the finest depth map."""
        return self.forward(x, Context.eval())[-1]


def _concat_shape(shapes, name, report):
    ref = shapes[0]
    for s in shapes[1:]:
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise F.ShapeError(f"{name}: cannot concatenate {s} with {ref}")
    out = (ref[0], sum(s[1] for s in shapes), ref[2], ref[3])
    report.append((name, out, 0))
    return out


def build_encoder(spec: NetworkSpec, initialize=True, dtype=np.float32) -> Encoder:
    h, w = spec.input_size
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    enc = Encoder(spec).assign_names("encoder")
    if initialize:
        enc.initialize(rng_streams.stream(spec.seed, "init"), dtype)
    return enc


def build_network(spec: NetworkSpec, initialize=True, dtype=np.float32) -> DepthNetwork:
    h, w = spec.input_size
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    net = DepthNetwork(spec)
    if initialize:
        net.initialize(rng_streams.stream(spec.seed, "init"), dtype)
    return net


def count_parameters(module: Module) -> int:
    """Kernels, biases and BN affine parameters (running stats excluded)."""
    return module.param_count()


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class RFStep:
    rf: int
    jump: int

    @property
    def effective_stride(self) -> int:
        return self.jump


def receptive_field(chain):
    """Per-layer receptive field for a chain of ``(k, s, p, d)`` layers.

    ``jump_out = jump_in * s`` and ``rf_out = rf_in + d*(k-1)*jump_in``,
    starting from ``rf = jump = 1``.
    """
    rf, jump = 1, 1
    steps = []
    for layer in chain:
        k, s = layer[0], layer[1]
        d = layer[3] if len(layer) > 3 else 1
        rf += d * (k - 1) * jump
        jump *= s
        steps.append(RFStep(rf, jump))
    return steps


def tap_receptive_fields(spec: NetworkSpec, dilated=True):
    enc = Encoder(spec, dilated=dilated)
    return {tap: receptive_field(chain)[-1].rf for tap, chain in enc.chains().items()}


# ---------------------------------------------------------------------------
# shape planning


@dataclass
class ShapeReport:
    spec: dict
    layers: list = field(default_factory=list)
    decoder: list = field(default_factory=list)
    taps: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    receptive_fields: dict = field(default_factory=dict)
    parameters: int = 0
    errors: list = field(default_factory=list)

    def to_dict(self):
        return {
            "schema_version": 1,
            "spec": self.spec,
            "decoder": self.decoder,
            "taps": {k: list(v) for k, v in self.taps.items()},
            "outputs": [list(o) for o in self.outputs],
            "receptive_fields": self.receptive_fields,
            "parameters": self.parameters,
            "errors": self.errors,
            "layers": [{"name": n, "shape": list(s), "params": p} for n, s, p in self.layers],
        }

    def to_text(self):
        width = max([len(n) for n, _, _ in self.layers] + [5])
        lines = [f"{'layer':<{width}}  {'output shape':<22}  {'params':>10}"]
        lines.append("-" * len(lines[0]))
        for name, shape, params in self.layers:
            lines.append(f"{name:<{width}}  {'x'.join(map(str, shape)):<22}  {params:>10}")
        lines.append("")
        lines.append(f"decoder: {''.join(self.decoder)}")
        lines.append(f"parameters: {self.parameters}")
        for tap, rf in self.receptive_fields.items():
            lines.append(f"receptive field {tap}: {rf}")
        for err in self.errors:
            lines.append(f"ERROR: {err}")
        return "\n".join(lines) + "\n"


def plan_shapes(spec: NetworkSpec, batch: int = 1) -> ShapeReport:
    """Symbolic shape propagation over the unallocated network."""
    net = DepthNetwork(spec)
    report = ShapeReport(spec.to_dict(), decoder=net.decoder_list(),
                         parameters=net.param_count(),
                         receptive_fields=tap_receptive_fields(spec))
    try:
        taps, outs = net.plan((batch, 3) + spec.input_size, report.layers)
        report.taps = taps
        report.outputs = outs
    except F.ShapeError as exc:
        report.errors.append(str(exc))
    return report


def check_table1(spec: NetworkSpec):
    """Compare the planned decoder list to the full-width reference row."""
    got = plan_shapes(spec).decoder
    want = TABLE1[spec.arch]
    return got == want, got, want
