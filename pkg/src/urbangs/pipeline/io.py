"""PFM, PLY and PNG readers/writers."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..splat.gaussians import GaussianSet


def write_pfm(path, data) -> None:
    """Write a float32 PFM: 'Pf' for (H,W), 'PF' for (H,W,3); little-endian, rows bottom to top."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        header = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(a)).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if header not in ("Pf", "PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii").strip()
        m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == "PF" else 1
        raw = np.frombuffer(f.read(), dtype=dtype)
    if raw.size != w * h * ch:
        raise ValueError(f"{path}: expected {w * h * ch} floats, found {raw.size}")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float32)


def write_png(path, image) -> None:
    """8-bit PNG from a float image in [0,1] or a boolean mask."""
    a = np.asarray(image)
    if a.dtype == bool:
        a8 = a.astype(np.uint8) * 255
    else:
        a8 = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(a8).save(path)


def read_png(path, mask: bool = False) -> np.ndarray:
    a = np.asarray(PILImage.open(path))
    if mask:
        return (a[..., 0] if a.ndim == 3 else a) > 127
    return a.astype(np.float64) / 255.0


def _to_uchar(c) -> np.ndarray:
    return np.round(np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0) * 255.0).astype(int)


def write_ply(path, points, colors=None, opacity=None) -> None:
    """ASCII PLY with x y z (float), red green blue (uchar) and optional opacity (float).

    A GaussianSet may be passed as ``points``; its activated opacities are written.
    Floats are stored as float32 printed with 9 significant digits.
    """
    if isinstance(points, GaussianSet):
        g = points
        points, colors, opacity = g.centers, g.colors, g.opacities
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = pts.shape[0]
    rgb = _to_uchar(np.full((n, 3), 0.5) if colors is None else np.asarray(colors).reshape(-1, 3))
    op = None if opacity is None else np.asarray(opacity, dtype=np.float32).reshape(-1)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if op is not None:
        lines.append("property float opacity")
    lines.append("end_header")
    for i in range(n):
        row = f"{pts[i, 0]:.9g} {pts[i, 1]:.9g} {pts[i, 2]:.9g} {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
        if op is not None:
            row += f" {op[i]:.9g}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> dict:
    """Read a PLY written by `write_ply`; returns a dict of column arrays."""
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props, n, i = [], 0, 1
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], parts[1]))
        i += 1
    rows = [line.split() for line in text[i + 1:i + 1 + n]]
    out = {}
    for j, (name, kind) in enumerate(props):
        col = [r[j] for r in rows]
        out[name] = np.array(col, dtype=np.float32 if kind == "float" else np.uint8)
    return out
