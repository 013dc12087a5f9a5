"""Standard depth-evaluation criteria over valid pixels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio.dataset import MAX_DEPTH

MIN_PRED = 1e-3


def valid_mask(gt, min_depth=0.0, max_depth=MAX_DEPTH):
    gt = np.asarray(gt)
    return (gt > min_depth) & (gt <= max_depth)


def _pairs(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt differ in size: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("metric over an empty pixel set")
    return pred, gt


def _positive(pred, gt):
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("depths must be positive")


def mean_rel(pred, gt):
    pred, gt = _pairs(pred, gt)
    return float(np.mean(np.abs(pred - gt) / gt))


def mean_log10(pred, gt):
    pred, gt = _pairs(pred, gt)
    _positive(pred, gt)
    return float(np.mean(np.abs(np.log10(pred) - np.log10(gt))))


def rmse(pred, gt):
    pred, gt = _pairs(pred, gt)
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def delta_threshold(pred, gt, k):
    """Percentage of pixels with ``max(pred/gt, gt/pred) < 1.25**k`` (strict)."""
    pred, gt = _pairs(pred, gt)
    _positive(pred, gt)
    ratio = np.maximum(pred / gt, gt / pred)
    return float(100.0 * np.mean(ratio < 1.25 ** k))


@dataclass
class MetricReport:
    rel: float
    log: float
    rms: float
    delta1: float
    delta2: float
    delta3: float
    n: int
    vcs: dict = field(default_factory=dict)

    COLUMNS = ("rel", "log", "rms", "δ1", "δ2", "δ3")

    def row(self):
        return (self.rel, self.log, self.rms, self.delta1, self.delta2, self.delta3)

    def to_dict(self):
        d = asdict(self)
        if not self.vcs:
            d.pop("vcs")
        return d

    def to_json(self):
        return json.dumps({"schema_version": 1, **self.to_dict()}, indent=2, sort_keys=True)

    def to_text(self, label="model"):
        return format_table([(label, self)])


def format_table(rows):
    """Aligned text table: errors to 3 decimals, percentages to 1 decimal."""
    width = max([len(label) for label, _ in rows] + [6])
    head = f"{'Method':<{width}} " + " ".join(f"{c:>7}" for c in MetricReport.COLUMNS)
    lines = [head, "-" * len(head)]
    for label, r in rows:
        vals = [f"{v:7.3f}" for v in r.row()[:3]] + [f"{v:7.1f}" for v in r.row()[3:]]
        lines.append(f"{label:<{width}} " + " ".join(vals))
    return "\n".join(lines) + "\n"


def metric_report(pred, gt, mask=None, max_depth=MAX_DEPTH) -> MetricReport:
    """All six criteria over the masked pixels, pooled into one ``N``.

    Predictions are clamped to ``[1e-3, max_depth]`` first.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    if mask is None:
        mask = valid_mask(gt, 0.0, max_depth)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask {mask.shape} and gt {gt.shape} differ in shape")
    if not mask.any():
        raise ValueError("metric_report: empty mask")
    p = np.clip(pred[mask], MIN_PRED, max_depth)
    y = gt[mask]
    return MetricReport(mean_rel(p, y), mean_log10(p, y), rmse(p, y),
                        delta_threshold(p, y, 1), delta_threshold(p, y, 2),
                        delta_threshold(p, y, 3), int(mask.sum()))


def metric_report_per_image(preds, gts, masks=None, max_depth=MAX_DEPTH) -> MetricReport:
    """Average of per-image reports (image order) instead of pooling pixels."""
    reports = [metric_report(p, g, None if masks is None else m, max_depth)
               for p, g, m in zip(preds, gts, masks if masks is not None else [None] * len(preds))]
    if not reports:
        raise ValueError("no images")
    vals = np.mean([r.row() for r in reports], axis=0)
    return MetricReport(*map(float, vals), n=sum(r.n for r in reports))
