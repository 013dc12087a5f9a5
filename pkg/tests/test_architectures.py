import json

import numpy as np
import pytest

from depthscope.architectures import (ARCHS, TABLE1, Encoder, NetworkSpec, build_network,
                                      check_table1, count_parameters, plan_shapes, receptive_field,
                                      tap_receptive_fields)
from depthscope.engine import Context, Conv2d, MaxPool2d, Module, ShapeError, gradcheck, jitter_affine

HALF_RES = (240, 320)


@pytest.mark.parametrize("arch", ARCHS)
def test_reference_decoder_rows(arch):
    ok, got, want = check_table1(NetworkSpec(arch))
    assert ok, (got, want)
    assert got == TABLE1[arch]


def test_reference_decoder_strings():
    joined = {a: "".join(plan_shapes(NetworkSpec(a)).decoder) for a in ARCHS}
    assert joined["ssn"] == "[2048-1024][1024-512][512-256][256-64]"
    assert joined["skips"] == joined["fpo"] == "[3072-1024][1536-512][768-256][320-64]"
    assert joined["msml"] == "[3904-512][512-256][256-64]"
    assert joined["dsp"] == "[2560-1024][1024-512][512-256][256-64]"


def test_half_width_ssn_decoder():
    got = plan_shapes(NetworkSpec("ssn", omega=0.5)).decoder
    assert got == ["[1024-512]", "[512-256]", "[256-128]", "[128-32]"]


def test_omega_widths():
    assert NetworkSpec(omega=1 / 32).widths == (2, 8, 16, 32, 64)
    assert NetworkSpec(omega=1.0).widths == (64, 256, 512, 1024, 2048)
    for k in range(1, 33):
        assert all(w % 4 == 0 for w in NetworkSpec(omega=1 / k).widths[1:])


@pytest.mark.parametrize("arch", ARCHS)
def test_resolution_contract(arch):
    rep = plan_shapes(NetworkSpec(arch, input_size=HALF_RES))
    assert not rep.errors
    final = (30, 40) if arch == "msml" else (15, 20)
    assert tuple(rep.taps["stage4"][2:]) == final
    assert rep.taps["stage4"][1] == 2048
    assert tuple(rep.outputs[-1]) == (1, 1) + HALF_RES
    if arch == "fpo":
        assert [tuple(o[2:]) for o in rep.outputs] == [(30, 40), (60, 80), (120, 160), (240, 320)]
    else:
        assert len(rep.outputs) == 1


def test_indivisible_input_rejected():
    with pytest.raises(ValueError):
        build_network(NetworkSpec("ssn", omega=1 / 32, input_size=(40, 40)))


def test_invalid_arch_and_omega():
    with pytest.raises(ValueError):
        NetworkSpec("resnet")
    with pytest.raises(ValueError):
        NetworkSpec("ssn", omega=0)
    with pytest.raises(ValueError):
        NetworkSpec("ssn", blocks_per_stage=(2, 2, 2))


def test_spec_json_roundtrip():
    spec = NetworkSpec("msml", (1, 2, 3, 1), 0.25, (64, 96), seed=5)
    back = NetworkSpec.from_json(spec.to_json())
    assert back == spec
    assert json.loads(spec.to_json())["input_size"] == [64, 96]


@pytest.mark.parametrize("arch", ARCHS)
def test_plan_matches_traced_forward(arch):
    spec = NetworkSpec(arch, omega=1 / 16, input_size=(48, 64))
    rep = plan_shapes(spec, batch=2)
    net = build_network(spec)
    ctx = Context.eval()
    ctx.trace = {}
    outs = net.forward(np.zeros((2, 3, 48, 64), np.float32), ctx)
    assert [o.shape for o in outs] == [tuple(o) for o in rep.outputs]
    planned = {name: tuple(shape) for name, shape, _ in rep.layers}
    common = set(planned) & set(ctx.trace)
    assert len(common) > 20
    for name in common:
        assert planned[name] == ctx.trace[name], name


def test_plan_reports_shape_error_without_allocating():
    spec = NetworkSpec("ssn", input_size=(100, 100))
    rep = plan_shapes(spec)
    assert rep.errors
    net = build_network(NetworkSpec("ssn", omega=1 / 32, input_size=(32, 32)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 40, 40), np.float32), Context.eval())


def test_receptive_field_examples():
    def rf(*layers):
        return receptive_field([m.geometry for m in layers])[-1].rf

    assert rf(Conv2d(1, 1, 3)) == 3
    assert rf(Conv2d(1, 1, 3), Conv2d(1, 1, 3)) == 5
    assert rf(Conv2d(1, 1, 3, dilation=2)) == 5
    assert rf(Conv2d(1, 1, 3, stride=2), Conv2d(1, 1, 3)) == 7
    # pool: rf 3, jump 2; dilated conv adds 2 * 2 * 2
    assert rf(MaxPool2d(3, 2, 1), Conv2d(1, 1, 3, dilation=2)) == 11


@pytest.mark.parametrize("arch", ["ssn", "msml", "dsp"])
def test_dilation_preserves_receptive_field(arch):
    spec = NetworkSpec(arch)
    dil = tap_receptive_fields(spec, dilated=True)
    base = tap_receptive_fields(spec, dilated=False)
    assert dil == base
    assert isinstance(dil["stage4"], int)


def test_dilation_changes_resolution_only():
    spec = NetworkSpec("msml", input_size=HALF_RES)
    plain = Encoder(spec, dilated=False).plan((1, 3) + HALF_RES, [])
    dil = Encoder(spec, dilated=True).plan((1, 3) + HALF_RES, [])
    assert plain["stage4"][1] == dil["stage4"][1]
    assert tuple(plain["stage4"][2:]) == (8, 10)
    assert tuple(dil["stage4"][2:]) == (30, 40)


def test_count_parameters_examples():
    assert count_parameters(Conv2d(2, 4, 3)) == 76
    assert count_parameters(Module()) == 0


def test_parameter_count_scales_quadratically():
    full = plan_shapes(NetworkSpec("ssn", omega=0.5)).parameters
    half = plan_shapes(NetworkSpec("ssn", omega=0.25)).parameters
    assert 0.2 <= half / full <= 0.3


def test_allocated_count_matches_plan():
    spec = NetworkSpec("dsp", omega=1 / 16, input_size=(32, 32))
    assert count_parameters(build_network(spec)) == plan_shapes(spec).parameters


def test_network_gradcheck():
    # the acceptance suite repeats this for every architecture
    net = build_network(NetworkSpec("ssn", omega=1 / 32, input_size=(32, 32)), dtype=np.float64)
    # keep BN affine params off their constant init so no unit sits on a kink
    jitter_affine(net, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((1, 3, 32, 32))
    res = gradcheck(net, x, entries_per_tensor=4, seed=3)
    assert res.max_rel_error < 1e-4, max(res.per_tensor, key=res.per_tensor.get)
    assert "input" in res.per_tensor
