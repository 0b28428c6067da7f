"""File-based handshake for running a depth enhancer in another process.

A bundle is a directory holding::

    bundle.json        cameras (intrinsics + pose), enhancer config, neighbor count
    d_init.pfm  d_ref.pfm  conf.pfm  image.pfm (3 channels)
    neighbor_<k>.pfm   one depth per neighbor view

The enhancer writes ``refined.pfm`` next to them. PFM keeps float32 depths bit-exact.
"""
from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..core import Camera, DepthMap, Image, RigidTransform
from ..enhancer import ConfidenceMap, EnhanceResult, EnhancerConfig, enhance
from .io import read_pfm, write_pfm

BUNDLE = "bundle.json"
REFINED = "refined.pfm"


def _cam_dict(c: Camera) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
            "pose": [float(x) for x in c.pose.matrix()[:3].reshape(-1)]}


def _cam_from(d: dict) -> Camera:
    return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], RigidTransform.from_matrix(d["pose"]))


def write_bundle(root, d_init, d_ref, conf, image, neighbors, cam_i: Camera, config: EnhancerConfig) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_pfm(root / "d_init.pfm", np.asarray(d_init, dtype=np.float64))
    write_pfm(root / "d_ref.pfm", np.asarray(d_ref, dtype=np.float64))
    write_pfm(root / "conf.pfm", np.asarray(conf, dtype=np.float64))
    write_pfm(root / "image.pfm", image.values if isinstance(image, Image) else np.asarray(image))
    for k, (d, _) in enumerate(neighbors):
        write_pfm(root / f"neighbor_{k}.pfm", np.asarray(d, dtype=np.float64))
    meta = {"camera": _cam_dict(cam_i), "neighbors": [_cam_dict(c) for _, c in neighbors],
            "config": asdict(config)}
    (root / BUNDLE).write_text(json.dumps(meta, indent=1))
    return root


def read_bundle(root) -> dict:
    root = Path(root)
    meta = json.loads((root / BUNDLE).read_text())
    nbrs = [(DepthMap(read_pfm(root / f"neighbor_{k}.pfm")), _cam_from(c)) for k, c in enumerate(meta["neighbors"])]
    return {
        "d_init": DepthMap(read_pfm(root / "d_init.pfm")),
        "d_ref": DepthMap(read_pfm(root / "d_ref.pfm")),
        "conf": ConfidenceMap(read_pfm(root / "conf.pfm") > 0.5),
        "image": Image(read_pfm(root / "image.pfm")),
        "neighbors": nbrs,
        "cam_i": _cam_from(meta["camera"]),
        "config": EnhancerConfig.from_dict(meta["config"]),
    }


def enhance_bundle(root) -> EnhanceResult:
    """Run the built-in enhancer on a bundle and write ``refined.pfm``."""
    b = read_bundle(root)
    res = enhance(b["d_init"], b["d_ref"], b["conf"], b["image"], b["neighbors"], b["cam_i"], b["config"])
    write_pfm(Path(root) / REFINED, res.depth.values)
    return res


class ExternalEnhancer:
    """Enhancer that shells out: ``command`` receives the bundle directory as its last argument."""

    def __init__(self, command: str, workdir):
        self.command = shlex.split(command)
        self.workdir = Path(workdir)
        self.calls = 0

    def __call__(self, d_init, d_ref, conf, image, neighbors, cam_i, config) -> EnhanceResult:
        root = self.workdir / f"call_{self.calls:05d}"
        self.calls += 1
        write_bundle(root, d_init, d_ref, conf, image, neighbors, cam_i, config)
        proc = subprocess.run(self.command + [str(root)], capture_output=True, text=True)
        out = root / REFINED
        if proc.returncode != 0 or not out.exists():
            # signalled like a numerical abort: keep the initial depth
            return EnhanceResult(DepthMap(np.asarray(d_init)), 0, 0, False, True, [])
        return EnhanceResult(DepthMap(read_pfm(out)), 0, 0, False, False, [])
