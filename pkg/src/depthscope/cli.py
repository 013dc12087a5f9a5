"""``depthscope`` command line: train, eval, infer, plan, gradcheck, vcs, synth.

Configuration is layered as built-in defaults < ``--config`` JSON < flags, and
every command writes the effective config next to its outputs.  Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import vcs as vcs_mod
from .architectures import ARCHS, NetworkSpec, build_network, check_table1, plan_shapes
from .dataio import formats
from .dataio.dataset import (MAX_DEPTH, AugmentPolicy, downsample_pair, load_split, parse_manifest,
                             save_sample, to_batch, write_manifest)
from .dataio.synth import synth_generate, synth_intrinsics
from .metrics import format_table, metric_report, metric_report_per_image
from .training import (HyperParams, fpo_sequential_train, load_checkpoint, save_checkpoint, train)

log = logging.getLogger("depthscope")

SCHEMA_VERSION = 1
COMMANDS = ("train", "eval", "infer", "plan", "gradcheck", "vcs", "synth")
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad flags or config; exit status 2."""


@dataclass
class RunConfig:
    command: str = ""
    manifest: str | None = None
    out: str = "run"
    checkpoint: str | None = None
    inputs: list = field(default_factory=list)
    predictions: str | None = None
    network: NetworkSpec = field(default_factory=NetworkSpec)
    # desk-scale defaults: no warm-up floor, short runs; the full-scale 800/1000 stay on HyperParams
    hyper: HyperParams = field(default_factory=lambda: HyperParams(max_epochs=100, min_epochs=0))
    augment: AugmentPolicy | None = None
    intrinsics: vcs_mod.CameraIntrinsics | None = None
    translations: list = field(default_factory=list)
    seed: int = 0
    meters_per_unit: float | None = None
    downsample: int = 1
    fpo_schedule: str = "sequential"
    epochs_per_stage: int | None = None
    check_table1: bool = False
    corrupt: str | None = None
    all_archs: bool = False
    per_image: bool = False
    count: int = 8
    size: tuple = (48, 64)
    test_fraction: float = 0.25

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        d["hyper"] = asdict(self.hyper)
        d["augment"] = None if self.augment is None else asdict(self.augment)
        d["intrinsics"] = None if self.intrinsics is None else self.intrinsics.to_dict()
        d["translations"] = [list(t) for t in self.translations]
        d["size"] = list(self.size)
        d["inputs"] = [str(p) for p in self.inputs]
        return {"schema_version": SCHEMA_VERSION, **d}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for key, value in d.items():
            if key == "network":
                value = NetworkSpec.from_dict({**cfg.network.to_dict(), **value})
            elif key == "hyper":
                value = HyperParams(**{**asdict(cfg.hyper), **value})
            elif key == "augment":
                value = None if value is None else AugmentPolicy(**{k: tuple(v) if isinstance(v, list) else v
                                                                    for k, v in value.items()})
            elif key == "intrinsics":
                value = None if value is None else vcs_mod.CameraIntrinsics.from_dict(value)
            elif key == "size":
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg


# -- argument parsing -----------------------------------------------------------

# flag dest -> (section, key) inside RunConfig
_NETWORK_FLAGS = {"arch": "arch", "omega": "omega", "blocks": "blocks_per_stage",
                  "input_size": "input_size"}
_HYPER_FLAGS = {"lr": "learning_rate", "momentum": "momentum", "weight_decay": "weight_decay",
                "batch_size": "batch_size", "small_batch_size": "small_batch_size",
                "max_epochs": "max_epochs", "patience": "patience", "min_epochs": "min_epochs"}
_TOP_FLAGS = ("manifest", "out", "checkpoint", "inputs", "predictions", "seed", "meters_per_unit",
              "downsample", "fpo_schedule", "epochs_per_stage", "check_table1", "corrupt",
              "all_archs", "per_image", "count", "size", "test_fraction")


def build_parser():
    p = argparse.ArgumentParser(prog="depthscope", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON config; flags override its values")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("--seed", type=int, default=S)

    def network(sp):
        sp.add_argument("--arch", default=S, help=f"one of {', '.join(ARCHS)}")
        sp.add_argument("--omega", type=float, default=S, help="channel multiplier")
        sp.add_argument("--blocks", type=int, nargs=4, default=S, metavar="N",
                        help="bottleneck blocks per encoder stage")
        sp.add_argument("--input-size", type=int, nargs=2, default=S, metavar=("H", "W"))

    def data(sp):
        sp.add_argument("--manifest", default=S)
        sp.add_argument("--meters-per-unit", type=float, default=S,
                        help="scale for 16-bit PGM depth without a sidecar")
        sp.add_argument("--downsample", type=int, default=S, help="integer subsampling factor")

    def camera(sp):
        for name in ("fx", "fy", "cx", "cy"):
            sp.add_argument(f"--{name}", type=float, default=S)
        sp.add_argument("--t", dest="translations", type=float, nargs=2, action="append", default=S,
                        metavar=("TX", "TY"), help="VCS camera translation in meters (repeatable)")

    sp = sub.add_parser("train", help="train a network from a manifest")
    common(sp), network(sp), data(sp)
    sp.add_argument("--lr", type=float, default=S)
    sp.add_argument("--momentum", type=float, default=S)
    sp.add_argument("--weight-decay", type=float, default=S)
    sp.add_argument("--batch-size", type=int, default=S)
    sp.add_argument("--small-batch-size", type=int, default=S)
    sp.add_argument("--max-epochs", type=int, default=S)
    sp.add_argument("--patience", type=int, default=S)
    sp.add_argument("--min-epochs", type=int, default=S)
    sp.add_argument("--augment", dest="use_augment", action="store_true", default=S,
                    help="enable zoom/rotation/colour/flip augmentation")
    sp.add_argument("--fpo-schedule", choices=("sequential", "joint"), default=S)
    sp.add_argument("--epochs-per-stage", type=int, default=S)

    sp = sub.add_parser("eval", help="metrics over the test split")
    common(sp), data(sp), camera(sp)
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("--predictions", default=S,
                    help="directory of <rgb stem>.pfm predictions used instead of a checkpoint")
    sp.add_argument("--per-image", action="store_true", default=S,
                    help="average the metrics per image instead of pooling all pixels")

    sp = sub.add_parser("infer", help="predict depth for images")
    common(sp)
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("inputs", nargs="*", default=S)

    sp = sub.add_parser("plan", help="shape report without allocating weights")
    common(sp), network(sp)
    sp.add_argument("--check-table1", action="store_true", default=S)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp), network(sp)
    sp.add_argument("--corrupt", default=S, metavar="LAYER",
                    help="scale one layer's parameter gradient (negative control)")
    sp.add_argument("--all-archs", action="store_true", default=S)

    sp = sub.add_parser("vcs", help="viewpoint change simulation metrics")
    common(sp), data(sp), camera(sp)
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("--predictions", default=S)

    sp = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    common(sp)
    sp.add_argument("--count", type=int, default=S)
    sp.add_argument("--size", type=int, nargs=2, default=S, metavar=("H", "W"))
    sp.add_argument("--test-fraction", type=float, default=S)
    return p


def resolve_config(args) -> RunConfig:
    """Defaults < ``--config`` file < flags."""
    base = RunConfig().to_dict()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key] = {**base[key], **value}
            else:
                base[key] = value
    given = vars(args)
    for dest, key in _NETWORK_FLAGS.items():
        if dest in given:
            base["network"][key] = given[dest]
    for dest, key in _HYPER_FLAGS.items():
        if dest in given:
            base["hyper"][key] = given[dest]
    for dest in _TOP_FLAGS:
        if dest in given:
            base[dest] = given[dest]
    if given.get("use_augment"):
        base["augment"] = base["augment"] or asdict(AugmentPolicy())
    cam = {k: given[k] for k in ("fx", "fy", "cx", "cy") if k in given}
    if cam:
        if base["intrinsics"] is None and len(cam) < 4:
            raise UsageError("intrinsics need all of --fx --fy --cx --cy")
        base["intrinsics"] = {**(base["intrinsics"] or {}), **cam}
    if "translations" in given:
        base["translations"] = given["translations"]
    base["command"] = args.command
    base["network"]["seed"] = base["seed"]
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- helpers --------------------------------------------------------------------


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _threads():
    raw = os.environ.get("DEPTHSCOPE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEPTHSCOPE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("DEPTHSCOPE_THREADS must be >= 1")
    return n


def _load(cfg, split, workers):
    if not cfg.manifest:
        raise UsageError(f"{cfg.command} needs --manifest")
    entries = parse_manifest(cfg.manifest)
    samples = load_split(entries, split, cfg.meters_per_unit, workers)
    if cfg.downsample > 1:
        samples = [downsample_pair(s, cfg.downsample) for s in samples]
    return samples


def _predictions(cfg, samples):
    """Yield one predicted depth map per sample, from PFM files or the checkpoint."""
    if cfg.predictions:
        for s in samples:
            path = Path(cfg.predictions) / (Path(s.source).stem + ".pfm")
            pred = formats.read_pfm(path)
            if pred.shape != s.size:
                raise formats.FormatError(f"{path}: prediction {pred.shape} vs sample {s.size}")
            yield pred
        return
    if not cfg.checkpoint:
        raise UsageError(f"{cfg.command} needs --checkpoint or --predictions")
    net, _ = load_checkpoint(cfg.checkpoint)
    for s in samples:
        x, _, _ = to_batch([s])
        yield net.predict(x)[0, 0]


def _require_camera(cfg):
    if cfg.intrinsics is None or not cfg.translations:
        raise UsageError("VCS needs intrinsics (--fx --fy --cx --cy) and at least one --t")


def _vcs_sample(rgb, gt, pred, intr, t):
    mask = gt > 0
    payload = vcs_mod.rgb_to_gray(rgb)
    res_gt = vcs_mod.simulate_viewpoint_change(payload, gt, intr, t, mask)
    res_inf = vcs_mod.simulate_viewpoint_change(payload, pred, intr, t, mask & (pred > 0))
    try:
        mse = vcs_mod.consistent_mse(res_inf, res_gt)
    except ValueError:
        mse = None
    try:
        terms = vcs_mod.contour_vcs_terms(rgb, gt, pred, intr, t)
    except ValueError:
        terms = None
    return res_gt, res_inf, mse, terms


def _vcs_summary(per_image):
    mses = [r["consistent_mse"] for r in per_image if r["consistent_mse"] is not None]
    terms = [tuple(r["contour_terms"]) for r in per_image if r["contour_terms"] is not None]
    return {
        "consistent_mse": float(np.mean(mses)) if mses else None,
        "contour": vcs_mod.aggregate_contour(terms) if terms else None,
        "contour_pooled": vcs_mod.aggregate_contour(terms, pooled=True) if terms else None,
        "n_pairs": len(per_image),
    }


# -- commands -------------------------------------------------------------------


def cmd_train(cfg, workers):
    train_set = _load(cfg, "train", workers)
    val_set = _load(cfg, "val", workers)
    if not train_set:
        raise UsageError("manifest has no train rows")
    if not val_set:
        raise UsageError("manifest has no val rows (and too few train rows to carve one)")
    size = train_set[0].size
    if any(s.size != size for s in train_set + val_set):
        raise UsageError("all samples must share one size")
    if tuple(cfg.network.input_size) != size:
        log.info("input size set from data: %s", size)
        cfg.network = NetworkSpec.from_dict({**cfg.network.to_dict(), "input_size": list(size)})
    out = _out_dir(cfg)
    net = build_network(cfg.network)
    if cfg.network.arch == "fpo" and cfg.fpo_schedule == "sequential":
        hists = fpo_sequential_train(net, train_set, val_set, cfg.hyper, cfg.seed, cfg.augment,
                                     cfg.epochs_per_stage)
        history = {"schema_version": SCHEMA_VERSION,
                   "stages": [h.to_dict() for h in hists]}
        csv_text = "stage," + hists[0].to_csv().splitlines()[0] + "\n" + "".join(
            f"{k + 1},{line}\n" for k, h in enumerate(hists) for line in h.to_csv().splitlines()[1:])
        epochs = sum(len(h.val_score) for h in hists)
    else:
        hist = train(net, train_set, val_set, cfg.hyper, cfg.seed, cfg.augment)
        history, csv_text, epochs = hist.to_dict(), hist.to_csv(), len(hist.val_score)
    save_checkpoint(out / "checkpoint.dsck", net, epoch=epochs)
    _write_json(out / "history.json", history)
    (out / "history.csv").write_text(csv_text)
    print(f"trained {cfg.network.arch} for {epochs} epochs -> {out}")
    return 0


def cmd_eval(cfg, workers):
    samples = _load(cfg, "test", workers)
    if not samples:
        raise UsageError("manifest has no test rows")
    preds = list(_predictions(cfg, samples))
    out = _out_dir(cfg)
    masks = [s.mask & (s.depth <= MAX_DEPTH) for s in samples]
    if cfg.per_image:
        report = metric_report_per_image(preds, [s.depth for s in samples], masks)
    else:
        report = metric_report(np.concatenate([p.ravel() for p in preds]),
                               np.concatenate([s.depth.ravel() for s in samples]),
                               np.concatenate([m.ravel() for m in masks]))
    if cfg.intrinsics is not None and cfg.translations:
        per = []
        for s, p in zip(samples, preds):
            for t in cfg.translations:
                _, _, mse, terms = _vcs_sample(s.rgb, s.depth, p, cfg.intrinsics, t)
                per.append({"consistent_mse": mse, "contour_terms": terms})
        report.vcs = _vcs_summary(per)
    label = cfg.network.arch if not cfg.predictions else "predictions"
    if cfg.checkpoint and not cfg.predictions:
        label = load_checkpoint(cfg.checkpoint)[1]["spec"]["arch"]
    _write_json(out / "metrics.json", {"schema_version": SCHEMA_VERSION, **report.to_dict()})
    text = report.to_text(label)
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return 0


def _depth_to_pgm(depth, max_depth=MAX_DEPTH):
    return np.rint(np.clip(depth / max_depth, 0, 1) * 255).astype(np.uint8)


def cmd_infer(cfg, workers):
    if not cfg.checkpoint:
        raise UsageError("infer needs --checkpoint")
    if not cfg.inputs:
        raise UsageError("infer needs at least one input image")
    net, _ = load_checkpoint(cfg.checkpoint)
    out = _out_dir(cfg)
    for path in cfg.inputs:
        rgb = formats.read_rgb(path)
        h, w = rgb.shape[:2]
        if h % 16 or w % 16:
            raise formats.FormatError(f"{path}: {w}x{h} is not divisible by 16")
        pred = net.predict(rgb.transpose(2, 0, 1)[None].astype(np.float32))[0, 0]
        stem = out / Path(path).stem
        formats.write_pfm(stem.with_suffix(".pfm"), pred.astype(np.float32))
        formats.write_pgm(stem.with_suffix(".pgm"), _depth_to_pgm(pred), maxval=255)
        print(f"{path} -> {stem}.pfm")
    return 0


def cmd_plan(cfg, workers):
    report = plan_shapes(cfg.network)
    out = _out_dir(cfg)
    d = report.to_dict()
    status = 0
    if cfg.check_table1:
        ok, got, want = check_table1(cfg.network)
        d["table1"] = {"ok": ok, "got": got, "want": want}
        if not ok:
            status = 1
    _write_json(out / "plan.json", d)
    text = report.to_text()
    (out / "plan.txt").write_text(text)
    print(text, end="")
    if cfg.check_table1:
        print(f"table1 {cfg.network.arch}: {'PASS' if status == 0 else 'FAIL'} "
              f"got {''.join(d['table1']['got'])} want {''.join(d['table1']['want'])}")
    if report.errors:
        status = 1
    return status


def _layer_cases(rng):
    """Small instances of every layer type, each with an input in float64."""
    from .blocks import ASPP, AsppSpec, Bottleneck, BottleneckSpec, DepthHead, UpProjection, UpProjSpec
    from .engine import (BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, ReLU, RReLU, Sequential,
                         Upsample)

    cases = {
        "conv2d": (Conv2d(3, 4, 3), (2, 3, 6, 5)),
        "conv2d_strided_dilated": (Conv2d(2, 3, 3, stride=2, dilation=2), (1, 2, 9, 8)),
        "batchnorm2d": (BatchNorm2d(3), (4, 3, 3, 3)),
        "rrelu": (RReLU(), (2, 3, 4, 4)),
        "relu": (Sequential(Conv2d(2, 2, 1), ReLU()), (2, 2, 4, 4)),
        "maxpool2d": (MaxPool2d(3, 2, 1), (1, 2, 7, 6)),
        "upsample": (Upsample(2), (1, 2, 3, 3)),
        "global_avg_pool": (GlobalAvgPool(), (2, 3, 4, 5)),
        "bottleneck": (Bottleneck(BottleneckSpec(4, 2, 8, stride=2)), (2, 4, 6, 6)),
        "up_projection": (UpProjection(UpProjSpec(3, 2)), (2, 3, 3, 3)),
        "aspp": (ASPP(AsppSpec(3, 2)), (2, 3, 5, 4)),
        "depth_head": (DepthHead(3), (1, 3, 5, 5)),
    }
    for name, (mod, shape) in cases.items():
        mod.assign_names(name)
        mod.initialize(rng, np.float64)
        if isinstance(mod, DepthHead):
            mod.conv.bias.data[:] = 1.0
        yield name, mod, rng.standard_normal(shape)


def run_gradcheck(archs, corrupt=None, entries_per_tensor=4, seed=0, layers=True):
    """Per-layer-type and whole-network checks; returns the JSON report."""
    from .engine import gradcheck, jitter_affine

    rng = np.random.default_rng(seed)
    report = {"schema_version": SCHEMA_VERSION, "tolerance": GRADCHECK_TOL, "layer_types": {},
              "networks": {}}
    if layers:
        for name, mod, x in _layer_cases(rng):
            report["layer_types"][name] = gradcheck(mod, x).max_rel_error
    for arch in archs:
        spec = NetworkSpec(arch, omega=1 / 32, input_size=(32, 32), seed=seed)
        net = build_network(spec, dtype=np.float64)
        jitter_affine(net, np.random.default_rng(seed + 1))
        if corrupt:
            mods = dict(net.named_modules())
            if corrupt not in mods:
                raise UsageError(f"no layer named {corrupt!r} in {arch}")
            mods[corrupt].corrupt = True
        x = np.random.default_rng(seed + 2).standard_normal((1, 3, 32, 32))
        res = gradcheck(net, x, entries_per_tensor=entries_per_tensor, seed=seed + 3)
        layers_err = res.per_layer()
        report["networks"][arch] = {"max_rel_error": res.max_rel_error,
                                    "input": layers_err.pop("input", None), "layers": layers_err}
    worst = [v for v in report["layer_types"].values()]
    worst += [n["max_rel_error"] for n in report["networks"].values()]
    report["max_rel_error"] = max(worst) if worst else 0.0
    report["pass"] = report["max_rel_error"] < GRADCHECK_TOL
    return report


def cmd_gradcheck(cfg, workers):
    archs = ARCHS if cfg.all_archs else (cfg.network.arch,)
    out = _out_dir(cfg)
    report = run_gradcheck(archs, cfg.corrupt, seed=cfg.seed)
    _write_json(out / "gradcheck.json", report)
    for name, err in report["layer_types"].items():
        print(f"{'ok  ' if err < GRADCHECK_TOL else 'FAIL'} {name:<24} {err:.3e}")
    for arch, res in report["networks"].items():
        for layer, err in res["layers"].items():
            if err >= GRADCHECK_TOL:
                print(f"FAIL {arch}:{layer:<40} {err:.3e}")
        print(f"{'ok  ' if res['max_rel_error'] < GRADCHECK_TOL else 'FAIL'} network {arch:<16} "
              f"{res['max_rel_error']:.3e}")
    return 0 if report["pass"] else 1


def cmd_vcs(cfg, workers):
    _require_camera(cfg)
    samples = _load(cfg, "test", workers)
    if not samples:
        raise UsageError("manifest has no test rows")
    out = _out_dir(cfg)
    img_dir = out / "vcs"
    img_dir.mkdir(exist_ok=True)
    per_image = []
    for s, pred in zip(samples, _predictions(cfg, samples)):
        stem = Path(s.source).stem
        for k, t in enumerate(cfg.translations):
            res_gt, res_inf, mse, terms = _vcs_sample(s.rgb, s.depth, pred, cfg.intrinsics, t)
            vcs_mod.save_vcs(res_gt, img_dir / f"{stem}_t{k}_gt")
            vcs_mod.save_vcs(res_inf, img_dir / f"{stem}_t{k}_inferred")
            per_image.append({
                "source": stem, "t": list(t), "consistent_mse": mse,
                "contour_terms": list(terms) if terms else None,
                "contour": terms[0] / terms[1] if terms else None,
            })
    summary = {"schema_version": SCHEMA_VERSION, **_vcs_summary(per_image), "per_image": per_image}
    _write_json(out / "vcs_summary.json", summary)
    print(f"consistent_mse {summary['consistent_mse']}  contour {summary['contour']}")
    return 0


def cmd_synth(cfg, workers):
    h, w = cfg.size
    samples = synth_generate(cfg.seed, cfg.count, (h, w))
    out = _out_dir(cfg)
    n_test = math.ceil(cfg.count * cfg.test_fraction) if cfg.test_fraction > 0 else 0
    rows = []
    for i, s in enumerate(samples):
        name = f"synth_{i:05d}"
        save_sample(s, out / f"{name}.ppm", out / f"{name}.pfm")
        rows.append((f"{name}.ppm", f"{name}.pfm", "test" if i >= cfg.count - n_test else "train"))
    write_manifest(out / "manifest.csv", rows)
    _write_json(out / "intrinsics.json", synth_intrinsics((h, w)).to_dict())
    print(f"wrote {cfg.count} samples to {out}")
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "plan": cmd_plan,
            "gradcheck": cmd_gradcheck, "vcs": cmd_vcs, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        threads = _threads()
        limiter = nullcontext()
        if threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=threads)
        with limiter:
            return HANDLERS[cfg.command](cfg, threads or 1)
    except UsageError as exc:
        print(f"depthscope {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any module failure is a runtime error
        if args.verbose:
            log.exception("command failed")
        print(f"depthscope {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
