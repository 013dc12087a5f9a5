"""Deterministic synthetic indoor scenes with analytic depth.

Each scene is a fronto-parallel back wall, a floor plane below the camera and
a few fronto-parallel boxes, rendered under a pinhole camera with
min-depth composition.  Surfaces carry a checker texture anchored in 3-D and
darken with distance, so the image contains depth cues.
"""

from __future__ import annotations

import numpy as np

from .. import rng as rng_streams
from ..vcs import CameraIntrinsics
from .dataset import MAX_DEPTH, DepthSample


def synth_intrinsics(size) -> CameraIntrinsics:
    h, w = size
    f = 0.9 * max(h, w)
    return CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0)


def _shade(color, z, tex):
    gain = np.clip(1.15 - 0.08 * z, 0.2, 1.0) * (0.8 + 0.2 * tex)
    return color[None, None, :] * gain[..., None]


def render_scene(rng, size):
    h, w = size
    intr = synth_intrinsics(size)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rx = (u - intr.cx) / intr.fx          # ray direction X/Z
    ry = (v - intr.cy) / intr.fy          # ray direction Y/Z (Y points down)

    depth = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))

    def composite(z, hit, color, tex):
        closer = hit & (z < depth)
        depth[closer] = z[closer]
        rgb[closer] = _shade(color, z, tex)[closer]

    # back wall
    zw = rng.uniform(6.0, 9.5)
    zwall = np.full((h, w), zw)
    tex = ((np.floor(rx * zw / 0.8) + np.floor(ry * zw / 0.8)) % 2)
    composite(zwall, np.ones((h, w), bool), rng.uniform(0.4, 1.0, 3), tex)

    # floor at camera height below the optical centre
    cam_h = rng.uniform(1.0, 1.6)
    below = ry > 1e-6
    zfloor = np.where(below, cam_h / np.where(below, ry, 1.0), 0.0)
    tex = ((np.floor(rx * zfloor / 0.5) + np.floor(zfloor / 0.5)) % 2)
    composite(zfloor, below & (zfloor <= MAX_DEPTH), rng.uniform(0.3, 0.9, 3), tex)

    # boxes resting near the floor
    for _ in range(int(rng.integers(1, 4))):
        z = rng.uniform(1.5, 5.0)
        bw, bh = rng.uniform(0.4, 1.4), rng.uniform(0.4, 1.4)
        x0 = rng.uniform(-1.5, 1.5) - bw / 2
        y1 = cam_h - rng.uniform(0.0, 0.3)
        y0 = y1 - bh
        X, Y = rx * z, ry * z
        hit = (X >= x0) & (X <= x0 + bw) & (Y >= y0) & (Y <= y1)
        tex = ((np.floor((X - x0) / 0.25) + np.floor((Y - y0) / 0.25)) % 2)
        composite(np.full((h, w), z), hit, rng.uniform(0.2, 1.0, 3), tex)

    depth = np.minimum(depth, MAX_DEPTH).astype(np.float32)
    return np.clip(rgb, 0, 1).astype(np.float32), depth


def synth_generate(seed: int, count: int, size=(48, 64)):
    """``count`` scenes of ``size = (H, W)``; a pure function of its arguments."""
    h, w = size
    if h % 16 or w % 16:
        raise ValueError(f"synthetic size {h}x{w} must be divisible by 16")
    rng = rng_streams.stream(seed, "synth")
    out = []
    for i in range(count):
        rgb, depth = render_scene(rng, size)
        out.append(DepthSample(rgb, depth, depth > 0, f"synth-{seed}-{i:05d}"))
    return out
