"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Context, Module


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f, x, eps=1e-6, indices=None, refine=3, tol=1e-6):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated
    in place and restored).  ``indices`` selects flat positions; default all.

    With ``refine > 0`` each entry is also differenced at ``eps / 10``.  If
    the two estimates disagree by more than ``tol`` (relative), kinks of
    ReLU-type units fall inside the stencil; the step ladder is extended to
    ``eps / 10**refine`` and the larger step of the best-agreeing
    neighbouring pair is returned.  Large steps straddle kinks, small steps
    drown in round-off.  Only function values enter this choice.
    """
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)

    def central(i, orig, h):
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    out = []
    for i in indices:
        orig = flat[i]
        ladder = [central(i, orig, eps)]
        if refine:
            ladder.append(central(i, orig, eps / 10))
            a, b = ladder
            if abs(a - b) > tol * max(abs(a), abs(b), 1e-6):
                for k in range(2, refine + 1):
                    ladder.append(central(i, orig, eps / 10 ** k))
                gaps = [abs(u - v) for u, v in zip(ladder, ladder[1:])]
                out.append(ladder[int(np.argmin(gaps))])
                continue
        out.append(ladder[0])
    return np.array(out)


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)

    def per_layer(self):
        """Fold ``layer.weight`` / ``layer.bias`` entries into one value per layer."""
        out: dict[str, float] = {}
        for name, err in self.per_tensor.items():
            layer = name.rsplit(".", 1)[0] if "." in name else name
            out[layer] = max(out.get(layer, 0.0), err)
        return out


def _sample(size, limit, rng):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


FLOOR_SCALE = 1e-3


def jitter_affine(module: Module, rng, spread=0.5):
    """Move every BatchNorm gamma/beta off its constant init so no unit sits
    exactly on an activation kink (e.g. a single-element batch statistic)."""
    from .layers import BatchNorm2d
    for _, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            m.gamma.data[:] = rng.uniform(1 - spread, 1 + spread, m.gamma.data.shape)
            m.beta.data[:] = rng.uniform(-spread, spread, m.beta.data.shape)
    return module


def gradcheck(module: Module, x, eps=1e-6, entries_per_tensor=None, seed=0, floor=None,
              make_context=Context.gradcheck, check_input=True):
    """Compare ``module.backward`` against central differences.

    The scalar objective is a fixed random projection of every output, so all
    output entries contribute.  ``entries_per_tensor`` caps the number of
    checked coordinates per parameter tensor (sampled without replacement);
    every parameter tensor is still visited.  Run this in float64.

    The relative-error denominator is floored at ``floor``; by default that is
    ``FLOOR_SCALE`` times the largest analytic gradient (at least 1e-6), so
    structurally-zero entries are judged against round-off of the whole
    objective rather than against themselves.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)

    def outputs_of(ctx):
        out = module.forward(x, ctx)
        return out if isinstance(out, list) else [out]

    probe = outputs_of(make_context())
    proj = [rng.standard_normal(o.shape) / np.sqrt(o.size) for o in probe]

    def objective():
        outs = outputs_of(make_context())
        return float(sum((o * w).sum() for o, w in zip(outs, proj)))

    module.zero_grad()
    ctx = make_context()
    raw = module.forward(x, ctx)
    grads = [w.copy() for w in proj]
    gx = module.backward(grads if isinstance(raw, list) else grads[0], ctx)

    result = GradcheckResult(0.0)
    targets = [(name, p.data, p.grad) for name, p in module.named_parameters()]
    if check_input:
        targets.append(("input", x, gx))
    if floor is None:
        scale = max((float(np.abs(g).max()) for _, _, g in targets if g is not None and g.size), default=0.0)
        floor = max(1e-6, FLOOR_SCALE * scale)
    for name, data, analytic in targets:
        idx = _sample(data.size, entries_per_tensor, rng)
        numeric = numerical_gradient(objective, data, eps, idx)
        err = float(relative_error(analytic.reshape(-1)[idx], numeric, floor).max())
        result.per_tensor[name] = err
        result.max_rel_error = max(result.max_rel_error, err)
    return result
