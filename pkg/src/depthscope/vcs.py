"""Viewpoint-change simulation (VCS) and the metrics built on it.

A VCS back-projects every valid pixel with a depth map, translates the camera
in its image plane (x/y only) and reprojects with nearest-pixel rounding and a
z-buffer.  Two scores compare the warp obtained from an inferred depth map to
the one from ground truth:

* ``consistent_mse``: mean squared payload difference over jointly valid pixels
* ``contour_vcs_metric``: mean distance (pixels) from warped inferred-depth
  edges to the nearest warped ground-truth edge
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass
class VcsResult:
    image: np.ndarray   # reprojected payload, zero where invalid
    mask: np.ndarray    # bool, True where some source point landed

    @property
    def n(self) -> int:
        return int(self.mask.sum())


def backproject(depth, intr: CameraIntrinsics, mask=None):
    """3-D points ``(M, 3)`` for valid pixels and their linear source indices.

    ``X = (u - cx) Z / fx``, ``Y = (v - cy) Z / fy`` with ``u`` the column and
    ``v`` the row.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0
    v, u = np.nonzero(mask)
    z = depth[v, u]
    if np.any(z <= 0):
        raise ValueError("backproject: valid pixels need positive depth")
    pts = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1)
    return pts, v * depth.shape[1] + u


def project_splat(points, payload, intr: CameraIntrinsics, t, shape, src_index=None) -> VcsResult:
    """Reproject translated points onto a ``shape = (H, W)`` grid.

    Points are moved into the translated camera ``(X - tx, Y - ty, Z)``,
    rounded to the nearest pixel (ties to even) and z-buffered: the smallest
    Z wins, equal Z falls back to the smallest source index, so the result
    does not depend on point order.
    """
    tx, ty = t[0], t[1]
    if len(t) > 2 and t[2] != 0:
        raise ValueError("only translations along x and y are supported")
    h, w = shape
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    payload = np.asarray(payload)
    if src_index is None:
        src_index = np.arange(len(points))
    out_shape = (h, w) + payload.shape[1:]
    image = np.zeros(out_shape, dtype=payload.dtype if payload.size else np.float64)
    mask = np.zeros((h, w), dtype=bool)

    z = points[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(intr.fx * (points[:, 0] - tx) / z + intr.cx)
        v = np.rint(intr.fy * (points[:, 1] - ty) / z + intr.cy)
    keep = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not keep.any():
        return VcsResult(image, mask)
    u, v, z = u[keep].astype(np.int64), v[keep].astype(np.int64), z[keep]
    src = np.asarray(src_index)[keep]
    pay = payload[keep]
    order = np.lexsort((src, z))
    target = (v * w + u)[order]
    _, first = np.unique(target, return_index=True)
    winners = order[first]
    lin = v[winners] * w + u[winners]
    image.reshape((h * w,) + payload.shape[1:])[lin] = pay[winners]
    mask.reshape(-1)[lin] = True
    return VcsResult(image, mask)


def simulate_viewpoint_change(image, depth, intr: CameraIntrinsics, t, mask=None) -> VcsResult:
    """Warp ``image`` (H, W) or (H, W, C) to a camera translated by ``t``."""
    image = np.asarray(image)
    depth = np.asarray(depth)
    if image.shape[:2] != depth.shape:
        raise ValueError(f"image {image.shape[:2]} and depth {depth.shape} differ in size")
    if mask is None:
        mask = depth > 0
    pts, idx = backproject(depth, intr, mask)
    payload = image.reshape((-1,) + image.shape[2:])[idx]
    return project_splat(pts, payload, intr, t, depth.shape, idx)


def consistent_mse(vcs_inferred: VcsResult, vcs_gt: VcsResult) -> float:
    """Mean squared payload difference over pixels valid in both warps.

    Multi-channel payloads average the per-channel MSEs.
    """
    if vcs_inferred.image.shape != vcs_gt.image.shape:
        raise ValueError("VCS results differ in shape")
    joint = vcs_inferred.mask & vcs_gt.mask
    n = int(joint.sum())
    if n == 0:
        raise ValueError("consistent_mse: no pixel is valid in both warps")
    diff = vcs_inferred.image[joint].astype(np.float64) - vcs_gt.image[joint].astype(np.float64)
    return float(np.mean(diff ** 2))


def rgb_to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"rgb_to_gray needs (H, W, 3) input, got {image.shape}")
    return image @ LUMA


# -- edges ---------------------------------------------------------------------


def canny(gray, sigma=1.4, low=0.1, high=0.2):
    """Binary Canny edges.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude.
    Non-maximum suppression breaks exact ties toward the later pixel along the
    quantized gradient direction, so a symmetric step yields a one-pixel line.
    """
    if not 0 < low < high:
        raise ValueError(f"canny thresholds must satisfy 0 < low < high, got {low}, {high}")
    g = ndimage.gaussian_filter(np.asarray(gray, dtype=np.float64), sigma) if sigma > 0 \
        else np.asarray(gray, dtype=np.float64)
    gx = ndimage.sobel(g, axis=1)
    gy = ndimage.sobel(g, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    # suppress floating-point dust from smoothing a flat region
    mag[mag < peak * 1e-9] = 0

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)         # 0: horizontal gradient
    sector[(angle >= 22.5) & (angle < 67.5)] = 1        # down-right diagonal
    sector[(angle >= 67.5) & (angle < 112.5)] = 2       # vertical gradient
    sector[(angle >= 112.5) & (angle < 157.5)] = 3      # down-left diagonal

    p = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dr, dc):
        return p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in offsets.items():
        ahead, behind = shifted(dr, dc), shifted(-dr, -dc)
        keep |= (sector == s) & (mag >= behind) & (mag > ahead)
    keep &= mag > 0

    strong = keep & (mag >= high * peak)
    weak = keep & (mag >= low * peak)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(mag.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels]


def _lower_envelope_1d(f):
    """Exact 1-D squared distance transform (lower envelope of parabolas)."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k], z[k + 1] = s, np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def distance_transform_edt(edges):
    """Euclidean distance from every pixel to the nearest ``True`` pixel,
    computed with two separable lower-envelope passes."""
    edges = np.asarray(edges, dtype=bool)
    if not edges.any():
        raise ValueError("distance transform needs at least one edge pixel")
    h, w = edges.shape
    # finite stand-in for infinity keeps the envelope arithmetic exact
    big = float((h + w) ** 2 + 1) * 1e3
    f = np.where(edges, 0.0, big)
    cols = np.empty_like(f)
    for c in range(w):
        cols[:, c] = _lower_envelope_1d(f[:, c])
    out = np.empty_like(f)
    for r in range(h):
        out[r] = _lower_envelope_1d(cols[r])
    return np.sqrt(out)


def edge_alignment(edges_inferred, edges_gt):
    """Sum and count of distances from inferred-edge pixels to the nearest
    ground-truth edge."""
    edges_inferred = np.asarray(edges_inferred, dtype=bool)
    if not edges_inferred.any():
        raise ValueError("no inferred edge pixel landed in frame")
    if not np.asarray(edges_gt, dtype=bool).any():
        raise ValueError("no ground-truth edge pixel landed in frame")
    dist = distance_transform_edt(edges_gt)
    return float(dist[edges_inferred].sum()), int(edges_inferred.sum())


def warp_edges(edges, depth, intr, t):
    res = simulate_viewpoint_change(edges.astype(np.float64), depth, intr, t)
    return res.mask & (res.image > 0.5)


def contour_vcs_terms(rgb, depth_gt, depth_inferred, intr, t, sigma=1.4, low=0.1, high=0.2):
    """``(distance_sum, edge_count)`` for one image; see :func:`contour_vcs_metric`."""
    edges = canny(rgb_to_gray(rgb), sigma, low, high)
    e_gt = warp_edges(edges, depth_gt, intr, t)
    e_inf = warp_edges(edges, depth_inferred, intr, t)
    return edge_alignment(e_inf, e_gt)


def contour_vcs_metric(rgb, depth_gt, depth_inferred, intr, t, sigma=1.4, low=0.1, high=0.2):
    """Mean distance in pixels from inferred-depth warped edges to the
    ground-truth warped edges."""
    total, count = contour_vcs_terms(rgb, depth_gt, depth_inferred, intr, t, sigma, low, high)
    return total / count


def aggregate_contour(terms, pooled=False):
    """Dataset value from per-image ``(sum, count)`` terms: the mean of
    per-image means, or the mean over all edge pixels when ``pooled``."""
    if not terms:
        raise ValueError("no images to aggregate")
    if pooled:
        return sum(s for s, _ in terms) / sum(c for _, c in terms)
    return float(np.mean([s / c for s, c in terms]))


def texture_vcs_pair(rgb, depth_gt, depth_inferred, intr, t, gray=True):
    payload = rgb_to_gray(rgb) if gray else np.asarray(rgb, dtype=np.float64)
    mask = depth_gt > 0
    vcs_gt = simulate_viewpoint_change(payload, depth_gt, intr, t, mask)
    vcs_i = simulate_viewpoint_change(payload, depth_inferred, intr, t,
                                      mask & (depth_inferred > 0))
    return vcs_i, vcs_gt


def save_vcs(result: VcsResult, stem):
    """Write the payload as PFM and the validity mask as an 8-bit PGM."""
    from .dataio import formats

    stem = Path(stem)
    img = result.image.astype(np.float32)
    formats.write_pfm(stem.with_suffix(".pfm"), img)
    formats.write_pgm(stem.with_name(stem.name + "_mask.pgm"), result.mask.astype(np.uint8) * 255,
                      maxval=255)
