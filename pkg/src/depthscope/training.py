"""SGD training with masked L2 loss, early stopping and the coarse-to-fine
FPO schedule; binary checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_streams
from .architectures import DepthNetwork, NetworkSpec, build_network
from .dataio.dataset import AugmentPolicy, augment, to_batch
from .engine import functional as F
from .engine.layers import Context
from .engine.optim import SGD


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch


@dataclass
class HyperParams:
    learning_rate: float = 5e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 3
    small_batch_size: int = 2
    max_epochs: int = 1000
    patience: int = 50
    min_epochs: int = 800

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.small_batch_size < 1:
            raise ValueError("patience and batch sizes must be >= 1")

    def batch_size_for(self, arch, fpo_stage=None):
        """MSML and the last two FPO stages use the smaller batch."""
        if arch == "msml" or (fpo_stage is not None and fpo_stage >= 3):
            return self.small_batch_size
        return self.batch_size


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_score: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    iterations: int = 0

    @property
    def best_score(self):
        return self.val_score[self.best_epoch] if self.best_epoch >= 0 else None

    def to_dict(self, include_time=False):
        d = {
            "schema_version": 1,
            "epochs": [{"epoch": i, "train_loss": tl, "val_score": vs}
                       for i, (tl, vs) in enumerate(zip(self.train_loss, self.val_score))],
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "iterations": self.iterations,
        }
        if include_time:
            for row, t in zip(d["epochs"], self.wall_time):
                row["wall_time"] = t
        return d

    def to_json(self, include_time=False):
        return json.dumps(self.to_dict(include_time), indent=2, sort_keys=True) + "\n"

    def to_csv(self, include_time=False):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_score"] + (["wall_time"] if include_time else []))
        for i, (tl, vs) in enumerate(zip(self.train_loss, self.val_score)):
            writer.writerow([i, repr(tl), repr(vs)] + ([repr(self.wall_time[i])] if include_time else []))
        return buf.getvalue()


def early_stop_check(scores, patience, min_epochs):
    """True iff the current epoch (``len(scores) - 1``) is at least
    ``min_epochs`` and each of the last ``patience`` epoch-over-epoch changes
    is a strict increase."""
    epoch = len(scores) - 1
    if epoch < min_epochs or len(scores) < patience + 1:
        return False
    tail = np.asarray(scores[-(patience + 1):], dtype=np.float64)
    return bool(np.all(np.diff(tail) > 0))


def _downsample_target(y, m, out_shape):
    f = y.shape[2] // out_shape[2]
    if f == 1:
        return y, m
    return y[:, :, ::f, ::f], m[:, :, ::f, ::f]


def validate(network: DepthNetwork, samples, output_index=-1):
    """Mean over images of the per-image masked L2 loss, in eval mode."""
    if not samples:
        raise ValueError("validation split is empty")
    n_out = None if output_index == -1 else output_index + 1
    losses = []
    for s in samples:
        x, y, m = to_batch([s])
        pred = network.forward(x, Context.eval(), n_outputs=n_out)[output_index]
        y, m = _downsample_target(y, m, pred.shape)
        losses.append(F.l2_loss(pred, y, m)[0])
    return float(np.mean(losses))


def train(network: DepthNetwork, train_samples, val_samples, hyper: HyperParams, seed=0,
          policy: AugmentPolicy | None = None, output_index=-1, batch_size=None,
          score_fn=None, callback=None):
    """Epoch loop: shuffle, (augment), forward, masked L2, backward, SGD step.

    After each epoch the validation score is recorded; training stops on
    ``max_epochs``, on :func:`early_stop_check`, or when ``callback(epoch,
    history)`` returns True.  The network is left holding the parameters of
    the best-scoring epoch.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    if score_fn is None:
        if not val_samples:
            raise ValueError("validation split is empty")

        def score_fn(net):
            return validate(net, val_samples, output_index)

    batch_size = batch_size or hyper.batch_size_for(network.arch)
    shuffle_rng = rng_streams.stream(seed, "shuffle")
    augment_rng = rng_streams.stream(seed, "augment")
    rrelu_rng = rng_streams.stream(seed, "rrelu")
    opt = SGD(network.parameters(), hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    n_out = None if output_index == -1 else output_index + 1

    history = TrainHistory()
    best_state = None
    start = time.perf_counter()
    for epoch in range(hyper.max_epochs):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        for b in range(0, len(order), batch_size):
            batch = [train_samples[i] for i in order[b:b + batch_size]]
            if policy is not None:
                batch = [augment(s, policy, augment_rng) for s in batch]
            x, y, m = to_batch(batch)
            ctx = Context.train(rrelu_rng)
            outs = network.forward(x, ctx, n_outputs=n_out)
            pred = outs[output_index]
            y, m = _downsample_target(y, m, pred.shape)
            if not m.any():
                continue
            loss, grad = F.l2_loss(pred, y, m)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            grads = [None] * len(outs)
            grads[output_index] = grad
            opt.zero_grad()
            network.backward(grads, ctx, need_input_grad=False)
            opt.step()
            losses.append(loss)
            history.iterations += 1
        score = float(score_fn(network))
        if not np.isfinite(score):
            raise TrainingDiverged(epoch, score)
        history.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        history.val_score.append(score)
        history.wall_time.append(time.perf_counter() - start)
        if history.best_epoch < 0 or score < history.val_score[history.best_epoch]:
            history.best_epoch = epoch
            best_state = [(n, a.copy()) for n, a in network.state_arrays()]
        if callback is not None and callback(epoch, history):
            history.stop_reason = "callback"
            break
        if early_stop_check(history.val_score, hyper.patience, hyper.min_epochs):
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"
    if best_state is not None:
        network.load_state_arrays(best_state)
    return history


FPO_STAGES = 4


def fpo_stage_modules(network: DepthNetwork, stage: int):
    """Modules trained in FPO stage ``stage`` (1-based)."""
    mods = [network.ups[stage - 1], network.heads[stage - 1]]
    if stage == 1:
        mods.insert(0, network.encoder)
    return mods


def fpo_sequential_train(network: DepthNetwork, train_samples, val_samples, hyper: HyperParams,
                         seed=0, policy=None, epochs_per_stage=None, on_stage_end=None):
    """Train the FPO outputs one at a time, coarse to fine.

    Stage ``k`` updates only up-projection ``k`` and its head (plus the encoder
    in stage 1) against ground truth subsampled to ``input / 2**(4-k)``; every
    other parameter is frozen.  Returns one history per stage.
    """
    if network.arch != "fpo":
        raise ValueError(f"sequential training needs an FPO network, got {network.arch!r}")
    histories = []
    stage_hyper = hyper if epochs_per_stage is None else \
        HyperParams(**{**asdict(hyper), "max_epochs": epochs_per_stage})
    try:
        for stage in range(1, FPO_STAGES + 1):
            network.set_trainable(False)
            for mod in fpo_stage_modules(network, stage):
                mod.set_trainable(True)
            hist = train(network, train_samples, val_samples, stage_hyper,
                         seed=seed + stage - 1, policy=policy, output_index=stage - 1,
                         batch_size=hyper.batch_size_for("fpo", stage))
            histories.append(hist)
            if on_stage_end is not None:
                on_stage_end(stage, network)
    finally:
        network.set_trainable(True)
    return histories


def gt_resolution(input_size, stage):
    """Ground-truth size used by FPO stage ``stage`` (1-based)."""
    f = 2 ** (FPO_STAGES - stage)
    return (input_size[0] // f, input_size[1] // f)


def parameter_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"DSCK"
VERSION = 1


def save_checkpoint(path, network: DepthNetwork, epoch=0, extra=None):
    """``DSCK`` | u32 version | u32 header length | JSON header | raw LE arrays."""
    arrays = network.state_arrays()
    header = {
        "spec": network.spec.to_dict(),
        "epoch": int(epoch),
        "dtype": "<f4",
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(network, header)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen])
    net = build_network(NetworkSpec.from_dict(header["spec"]))
    offset = 12 + hlen
    arrays = []
    for e in header["entries"]:
        n = int(np.prod(e["shape"]))
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(e["shape"])
        arrays.append((e["name"], a.astype(np.float32)))
        offset += 4 * n
    net.load_state_arrays(arrays)
    return net, header
