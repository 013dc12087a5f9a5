import json

import numpy as np
import pytest

from depthscope.cli import RunConfig, build_parser, main, resolve_config
from depthscope.dataio import formats

TINY = ["--omega", "0.03125"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--count", "6", "--size", "32", "32", "--seed", "2"]) == 0
    return root


def _camera(dataset):
    intr = json.loads((dataset / "intrinsics.json").read_text())
    return [x for k, v in intr.items() for x in (f"--{k}", str(v))]


def test_config_layering(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"hyper": {"learning_rate": 0.1, "patience": 7},
                                    "network": {"arch": "dsp"}, "seed": 9}))
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--lr", "0.2"])
    cfg = resolve_config(args)
    assert cfg.hyper.learning_rate == 0.2          # flag beats file
    assert cfg.hyper.patience == 7                 # file beats default
    assert cfg.hyper.momentum == 0.9               # default
    assert (cfg.hyper.min_epochs, cfg.hyper.max_epochs) == (0, 100)   # desk-scale CLI defaults
    assert cfg.network.arch == "dsp" and cfg.seed == 9 and cfg.network.seed == 9


def test_config_roundtrip():
    cfg = RunConfig(command="plan", translations=[[0.1, 0.0]])
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()


def test_usage_errors(tmp_path, dataset):
    assert main(["train", "--arch", "resnet", "--manifest", str(dataset / "manifest.csv")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["plan", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["vcs", "--manifest", str(dataset / "manifest.csv"), "--predictions", str(dataset),
                 "--out", str(tmp_path)]) == 2


def test_runtime_error_exit_1(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "missing.csv"), "--predictions", str(tmp_path),
                 "--out", str(tmp_path)]) == 1
    assert main(["infer", "--checkpoint", str(tmp_path / "none.dsck"), "--out", str(tmp_path),
                 str(tmp_path / "x.ppm")]) == 1


def test_synth_outputs(dataset):
    rows = (dataset / "manifest.csv").read_text().splitlines()
    assert rows[0] == "rgb,depth,split"
    assert [r.split(",")[2] for r in rows[1:]] == ["train"] * 4 + ["test"] * 2
    assert formats.read_pfm(dataset / "synth_00000.pfm").shape == (32, 32)


@pytest.mark.parametrize("arch", ["msml", "dsp"])
def test_plan_reference_check(tmp_path, arch, capsys):
    assert main(["plan", "--arch", arch, "--check-table1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "plan.json").read_text())
    assert report["schema_version"] == 1 and report["table1"]["ok"]
    first = {"msml": "[3904-512]", "dsp": "[2560-1024]"}[arch]
    assert report["decoder"][0] == first
    assert "PASS" in capsys.readouterr().out


def test_plan_reference_check_wrong_omega(tmp_path):
    assert main(["plan", "--arch", "ssn", "--omega", "0.5", "--check-table1", "--out", str(tmp_path)]) == 1
    assert (tmp_path / "config.json").exists()


def test_train_eval_infer(tmp_path, dataset):
    run = tmp_path / "run"
    argv = ["train", "--arch", "ssn", *TINY, "--manifest", str(dataset / "manifest.csv"), "--out", str(run),
            "--max-epochs", "2", "--min-epochs", "0", "--seed", "3"]
    assert main(argv) == 0
    for name in ("checkpoint.dsck", "history.json", "history.csv", "config.json"):
        assert (run / name).exists()
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["network"]["input_size"] == [32, 32] and cfg["seed"] == 3

    # replaying the written config reproduces the outputs byte for byte
    run2 = tmp_path / "run2"
    assert main(["train", "--config", str(run / "config.json"), "--out", str(run2)]) == 0
    for name in ("checkpoint.dsck", "history.json", "history.csv"):
        assert (run / name).read_bytes() == (run2 / name).read_bytes()

    ev = tmp_path / "ev"
    assert main(["eval", "--manifest", str(dataset / "manifest.csv"), "--checkpoint", str(run / "checkpoint.dsck"),
                 "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    text = (ev / "metrics.txt").read_text().splitlines()
    assert text[0].split() == ["Method", "rel", "log", "rms", "δ1", "δ2", "δ3"]
    printed = [float(v) for v in text[2].split()[1:]]
    for key, value in zip(["rel", "log", "rms", "delta1", "delta2", "delta3"], printed):
        assert round(metrics[key], 3 if key in ("rel", "log", "rms") else 1) == pytest.approx(value)

    inf = tmp_path / "inf"
    img = dataset / "synth_00000.ppm"
    assert main(["infer", "--checkpoint", str(run / "checkpoint.dsck"), "--out", str(inf), str(img)]) == 0
    pred = formats.read_pfm(inf / "synth_00000.pfm")
    assert pred.shape == (32, 32) and (pred >= 0).all()
    assert formats.read_pgm(inf / "synth_00000.pgm").dtype == np.uint8
    first = (inf / "synth_00000.pfm").read_bytes()
    assert main(["infer", "--checkpoint", str(run / "checkpoint.dsck"), "--out", str(inf), str(img)]) == 0
    assert (inf / "synth_00000.pfm").read_bytes() == first


def test_eval_identity_predictions(tmp_path, dataset):
    argv = ["eval", "--manifest", str(dataset / "manifest.csv"), "--predictions", str(dataset),
            "--out", str(tmp_path), *_camera(dataset), "--t", "0.1", "0", "--t", "0", "0.05"]
    assert main(argv) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert (m["rel"], m["log"], m["rms"]) == (0.0, 0.0, 0.0)
    assert (m["delta1"], m["delta2"], m["delta3"]) == (100.0, 100.0, 100.0)
    assert m["vcs"]["consistent_mse"] == 0.0 and m["vcs"]["contour"] == 0.0


def test_eval_per_image_flag(tmp_path, dataset):
    argv = ["eval", "--manifest", str(dataset / "manifest.csv"), "--predictions", str(dataset),
            "--out", str(tmp_path), "--per-image"]
    assert main(argv) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["rel"] == 0.0 and m["delta1"] == 100.0
    assert json.loads((tmp_path / "config.json").read_text())["per_image"] is True


def test_vcs_command(tmp_path, dataset):
    argv = ["vcs", "--manifest", str(dataset / "manifest.csv"), "--predictions", str(dataset),
            "--out", str(tmp_path), *_camera(dataset), "--t", "0", "0", "--t", "0.1", "0"]
    assert main(argv) == 0
    summary = json.loads((tmp_path / "vcs_summary.json").read_text())
    assert summary["schema_version"] == 1
    assert len(summary["per_image"]) == 4
    assert all(r["consistent_mse"] == 0.0 and r["contour"] == 0.0 for r in summary["per_image"])
    assert summary["consistent_mse"] == 0.0
    # the t = (0, 0) warp reproduces the grey image on its mask
    from depthscope.vcs import rgb_to_gray
    rgb = formats.read_ppm(dataset / "synth_00004.ppm")
    warped = formats.read_pfm(tmp_path / "vcs" / "synth_00004_t0_gt.pfm")
    mask = formats.read_pgm(tmp_path / "vcs" / "synth_00004_t0_gt_mask.pgm") > 0
    np.testing.assert_array_equal(warped[mask], rgb_to_gray(rgb).astype(np.float32)[mask])


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["pass"] and report["schema_version"] == 1
    assert {"conv2d", "batchnorm2d", "rrelu", "maxpool2d", "upsample", "bottleneck", "up_projection",
            "aspp", "depth_head"} <= set(report["layer_types"])

    from depthscope.architectures import NetworkSpec, build_network
    net = build_network(NetworkSpec("ssn", omega=1 / 32, input_size=(32, 32)))
    own = [name for name, m in net.named_modules() if m._params]
    layers = report["networks"]["ssn"]["layers"]
    assert sorted(layers) == sorted(own)


def test_gradcheck_corrupt_flags_one_layer(tmp_path):
    target = "encoder.stage2.0.spatial.0"
    assert main(["gradcheck", "--out", str(tmp_path), "--corrupt", target]) == 1
    layers = json.loads((tmp_path / "gradcheck.json").read_text())["networks"]["ssn"]["layers"]
    failing = [name for name, err in layers.items() if err >= 1e-4]
    assert failing == [target]
    assert main(["gradcheck", "--out", str(tmp_path), "--corrupt", "no.such.layer"]) == 2


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHSCOPE_THREADS", "1")
    assert main(["plan", "--arch", "ssn", "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("DEPTHSCOPE_THREADS", "zero")
    assert main(["plan", "--arch", "ssn", "--out", str(tmp_path)]) == 2


def test_sample_config_parses():
    from pathlib import Path
    path = Path(__file__).parents[1] / "configs" / "example_eval.json"
    cfg = RunConfig.from_dict(json.loads(path.read_text()))
    assert cfg.command == "eval" and cfg.intrinsics is not None and cfg.translations
