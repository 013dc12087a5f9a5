"""Readers and writers for PFM, PPM (P6), PGM (P5) and PNG images."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _read_header_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated Netpbm header tokens (comments
    allowed); returns tokens and the offset of the first data byte."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*").match(buf, pos)
        pos = m.end()
        m = re.compile(rb"\S+").match(buf, pos)
        if m is None:
            raise FormatError("truncated header")
        tokens.append(m.group().decode("ascii"))
        pos = m.end()
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


# -- PFM ---------------------------------------------------------------------


def write_pfm(path, data):
    """Write a float32 map (H, W) or (H, W, 3) as little-endian PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # rows are stored bottom to top
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    buf = Path(path).read_bytes()
    try:
        (tag, w, h, scale), offset = _read_header_tokens(buf, 4)
        w, h, scale = int(w), int(h), float(scale)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    if tag not in ("Pf", "PF"):
        raise FormatError(f"{path}: not a PFM file (tag {tag!r})")
    channels = 3 if tag == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=offset) if len(buf) - offset >= 4 * n \
        else None
    if raw is None:
        raise FormatError(f"{path}: truncated PFM raster")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raw.reshape(shape)[::-1].astype(np.float32)


# -- PPM / PGM -----------------------------------------------------------------


def write_ppm(path, rgb):
    """Write an (H, W, 3) image; floats are taken in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs (H, W, 3) data, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path):
    """Read an 8-bit P6 file into float32 RGB in [0, 1]."""
    buf = Path(path).read_bytes()
    (tag, w, h, maxval), offset = _read_header_tokens(buf, 4)
    if tag != "P6":
        raise FormatError(f"{path}: not a binary PPM (tag {tag!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    if len(buf) - offset < w * h * 3:
        raise FormatError(f"{path}: truncated PPM raster")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raw.reshape(h, w, 3).astype(np.float32) / maxval


def write_pgm(path, values, maxval=65535):
    """Write integer values as P5; 16-bit samples are big-endian."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"PGM needs (H, W) data, got {values.shape}")
    h, w = values.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(np.clip(values, 0, maxval).astype(dtype).tobytes())


def read_pgm(path):
    """Read a P5 file as raw integer samples (uint8 or uint16)."""
    buf = Path(path).read_bytes()
    (tag, w, h, maxval), offset = _read_header_tokens(buf, 4)
    if tag != "P5":
        raise FormatError(f"{path}: not a binary PGM (tag {tag!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    if len(buf) - offset < w * h * dtype.itemsize:
        raise FormatError(f"{path}: truncated PGM raster")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset)
    return raw.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def sidecar_path(depth_path) -> Path:
    p = Path(depth_path)
    return p.with_name(p.name + ".json")


def write_depth_pgm(path, depth, meters_per_unit):
    """Quantize metric depth to 16-bit PGM plus a ``{"meters_per_unit"}`` sidecar."""
    write_pgm(path, np.rint(np.asarray(depth, dtype=np.float64) / meters_per_unit))
    sidecar_path(path).write_text(json.dumps({"meters_per_unit": meters_per_unit}))


def read_depth_pgm(path, meters_per_unit=None):
    if meters_per_unit is None:
        side = sidecar_path(path)
        if not side.exists():
            raise FormatError(f"{path}: no meters_per_unit given and no sidecar {side.name}")
        meters_per_unit = float(json.loads(side.read_text())["meters_per_unit"])
    return (read_pgm(path).astype(np.float64) * meters_per_unit).astype(np.float32)


# -- PNG -------------------------------------------------------------------------


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_png(path, rgb):
    from PIL import Image

    rgb = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path)


def read_rgb(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise FormatError(f"{path}: unsupported RGB format {suffix!r}")


def read_depth(path, meters_per_unit=None):
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        d = read_pfm(path)
        if d.ndim != 2:
            raise FormatError(f"{path}: depth PFM must be single channel")
        return d
    if suffix == ".pgm":
        return read_depth_pgm(path, meters_per_unit)
    raise FormatError(f"{path}: unsupported depth format {suffix!r}")
