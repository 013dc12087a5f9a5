import csv
import io
import json

import numpy as np
import pytest

from depthscope.architectures import NetworkSpec, build_network
from depthscope.dataio import synth_generate
from depthscope.engine import Context
from depthscope.training import (HyperParams, TrainHistory, early_stop_check, fpo_sequential_train,
                                 gt_resolution, load_checkpoint, parameter_hash, save_checkpoint,
                                 train, validate)

SIZE = (32, 32)


@pytest.fixture(scope="module")
def data():
    return synth_generate(0, 4, SIZE)


def _net(arch="ssn", seed=0):
    return build_network(NetworkSpec(arch, omega=1 / 32, input_size=SIZE, seed=seed))


def _rising_after(min_epochs, patience, extra_flat=0):
    flat = [1.0] * (min_epochs + extra_flat)
    return flat + [1.0 + 0.01 * (i + 1) for i in range(patience)]


def test_hyperparams_defaults():
    hp = HyperParams()
    assert (hp.learning_rate, hp.momentum, hp.weight_decay) == (5e-3, 0.9, 5e-4)
    assert (hp.batch_size, hp.patience, hp.min_epochs) == (3, 50, 800)
    assert hp.batch_size_for("msml") == 2 and hp.batch_size_for("ssn") == 3
    assert hp.batch_size_for("fpo", 3) == hp.batch_size_for("fpo", 4) == 2
    assert hp.batch_size_for("fpo", 2) == 3
    with pytest.raises(ValueError):
        HyperParams(patience=0)


def test_early_stop_examples():
    scores = _rising_after(800, 50)
    # epochs 0..799 flat, the 50th consecutive rise lands on epoch 849
    assert len(scores) - 1 == 849
    assert early_stop_check(scores, 50, 800)
    assert not early_stop_check(scores[:-1], 50, 800)
    plateau = list(scores)
    plateau[830] = plateau[829]
    assert not early_stop_check(plateau, 50, 800)
    # rises that finish before min_epochs do not count
    early = [1.0 + 0.01 * i for i in range(60)]
    assert not early_stop_check(early, 50, 800)
    assert early_stop_check(early, 50, 0)


def test_train_stops_at_exact_epoch(data):
    curve = _rising_after(5, 3)
    hp = HyperParams(max_epochs=100, patience=3, min_epochs=5)
    calls = iter(curve + [9.0] * 100)
    hist = train(_net(), data, [], hp, score_fn=lambda net: next(calls))
    assert hist.stop_reason == "early_stopping"
    assert len(hist.val_score) == 8
    assert hist.val_score == curve
    assert hist.best_epoch == 0


def test_plateau_resets_window(data):
    curve = _rising_after(5, 3)
    curve.insert(7, curve[6])
    hp = HyperParams(max_epochs=len(curve), patience=3, min_epochs=5)
    calls = iter(curve)
    hist = train(_net(), data, [], hp, score_fn=lambda net: next(calls))
    assert hist.stop_reason == "max_epochs"
    assert len(hist.val_score) == len(curve)


def test_zero_learning_rate_is_fixed_point(data):
    net = _net()
    before = parameter_hash(net)
    hp = HyperParams(learning_rate=0.0, max_epochs=2, min_epochs=0)
    train(net, data, data[:1], hp)
    assert parameter_hash(net) == before


def test_training_reduces_loss(data):
    net = _net()
    start = validate(net, data)
    hp = HyperParams(max_epochs=15, min_epochs=0)
    hist = train(net, data, data, hp, seed=1)
    assert hist.iterations == 15 * 2
    assert min(hist.val_score) < start
    # the network is restored to the best epoch
    assert validate(net, data) == pytest.approx(min(hist.val_score), rel=1e-5)


def test_callback_stop(data):
    hist = train(_net(), data, data, HyperParams(max_epochs=10, min_epochs=0),
                 callback=lambda epoch, h: epoch == 1)
    assert hist.stop_reason == "callback" and len(hist.val_score) == 2


def test_empty_splits(data):
    with pytest.raises(ValueError):
        train(_net(), [], data, HyperParams())
    with pytest.raises(ValueError):
        train(_net(), data, [], HyperParams())
    with pytest.raises(ValueError):
        validate(_net(), [])


def test_validate_deterministic_and_linear(data):
    net = _net()
    a, b = validate(net, data), validate(net, data)
    assert a == b
    per = [validate(net, [s]) for s in data]
    assert a == pytest.approx(np.mean(per), rel=1e-12)


def test_history_serialisation():
    h = TrainHistory([0.5, 0.25], [0.4, 0.3], [1.0, 2.0], "max_epochs", 1, 6)
    d = json.loads(h.to_json())
    assert d["schema_version"] == 1 and d["best_epoch"] == 1
    assert "wall_time" not in d["epochs"][0]
    assert "wall_time" in json.loads(h.to_json(include_time=True))["epochs"][0]
    rows = list(csv.reader(io.StringIO(h.to_csv())))
    assert rows[0] == ["epoch", "train_loss", "val_score"]
    assert rows[2] == ["1", "0.25", "0.3"]


def test_gt_resolution():
    assert [gt_resolution((240, 320), k) for k in (1, 2, 3, 4)] == [
        (30, 40), (60, 80), (120, 160), (240, 320)]


def test_fpo_schedule_freezes_encoder(data):
    net = _net("fpo")
    hashes, shapes = {}, {}

    def on_stage_end(stage, network):
        hashes[stage] = parameter_hash(network.encoder)
        shapes[stage] = network.forward(np.zeros((1, 3) + SIZE, np.float32), Context.eval(),
                                        n_outputs=stage)[-1].shape[2:]

    before = parameter_hash(net.encoder)
    hists = fpo_sequential_train(net, data, data[:1], HyperParams(min_epochs=0), epochs_per_stage=2,
                                 on_stage_end=on_stage_end)
    assert len(hists) == 4
    assert hashes[1] != before
    assert hashes[1] == hashes[2] == hashes[3] == hashes[4]
    assert [shapes[k] for k in (1, 2, 3, 4)] == [gt_resolution(SIZE, k) for k in (1, 2, 3, 4)]
    assert all(p.requires_grad for _, p in net.named_parameters())


def test_fpo_schedule_rejects_other_archs(data):
    with pytest.raises(ValueError):
        fpo_sequential_train(_net("ssn"), data, data, HyperParams())


def test_checkpoint_roundtrip(tmp_path, data):
    net = _net("dsp")
    train(net, data, data[:1], HyperParams(max_epochs=1, min_epochs=0))
    save_checkpoint(tmp_path / "a.dsck", net, epoch=3, extra={"note": "x"})
    back, header = load_checkpoint(tmp_path / "a.dsck")
    assert header["epoch"] == 3 and header["extra"] == {"note": "x"}
    assert back.spec == net.spec
    for (n1, a1), (n2, a2) in zip(net.state_arrays(), back.state_arrays()):
        assert n1 == n2
        np.testing.assert_array_equal(a1, a2)
    x = np.random.default_rng(0).uniform(size=(1, 3) + SIZE).astype(np.float32)
    np.testing.assert_array_equal(net.predict(x), back.predict(x))
    save_checkpoint(tmp_path / "b.dsck", back, epoch=3, extra={"note": "x"})
    assert (tmp_path / "a.dsck").read_bytes() == (tmp_path / "b.dsck").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.dsck").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.dsck")


def test_same_seed_same_result(data):
    def run():
        net = _net()
        hist = train(net, data, data[:1], HyperParams(max_epochs=2, min_epochs=0), seed=4)
        return hist.to_json(), parameter_hash(net)

    assert run() == run()
