"""Multi-camera driving sequences in memory and on disk.

Layout::

    <root>/manifest.json
    <root>/<camera>/<frame>_image.png      8-bit RGB
    <root>/<camera>/<frame>_depth.pfm      estimated metric depth
    <root>/<camera>/<frame>_gt.pfm         ground-truth depth (optional)
    <root>/<camera>/<frame>_sky.png        masks, 0/255
    <root>/<camera>/<frame>_road.png
    <root>/<camera>/<frame>_dynamic.png

The manifest records per-view timestamps, intrinsics and camera-to-world poses
(row-major 3x4) plus per-frame object-to-world poses of rigid movers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..core import Camera, DepthMap, Image, MaskSet, RigidTransform
from .io import read_pfm, read_png, write_pfm, write_png

MANIFEST = "manifest.json"


@dataclass
class ViewRecord:
    frame: int
    camera_id: str
    timestamp: float
    camera: Camera
    image: Image
    depth: DepthMap
    masks: MaskSet
    gt_depth: DepthMap | None = None
    dynamic: np.ndarray | None = None

    @property
    def key(self) -> tuple[int, str]:
        return (self.frame, self.camera_id)


@dataclass
class Dataset:
    views: list[ViewRecord]
    frame_count: int
    # rigid mover name -> object-to-world pose per frame
    tracks: dict[str, list[RigidTransform]] = field(default_factory=dict)

    def __post_init__(self):
        by_cam: dict[str, list[ViewRecord]] = {}
        for v in self.views:
            by_cam.setdefault(v.camera_id, []).append(v)
        for cam_id, vs in by_cam.items():
            shapes = {(v.camera.width, v.camera.height) for v in vs}
            if len(shapes) != 1:
                raise ValueError(f"camera {cam_id!r} has inconsistent image sizes")
            ts = [v.timestamp for v in sorted(vs, key=lambda v: v.frame)]
            if any(b < a for a, b in zip(ts, ts[1:])):
                raise ValueError(f"camera {cam_id!r} timestamps are not monotone")
        for name, poses in self.tracks.items():
            if len(poses) != self.frame_count:
                raise ValueError(f"track {name!r} has {len(poses)} poses for {self.frame_count} frames")

    def view(self, key) -> ViewRecord:
        return self._index()[key]

    def _index(self) -> dict:
        return {v.key: v for v in self.views}

    @property
    def camera_ids(self) -> list[str]:
        return sorted({v.camera_id for v in self.views})

    def split(self, holdout_every: int = 4) -> tuple[list[ViewRecord], list[ViewRecord]]:
        """(train, heldout) views; every ``holdout_every``-th frame is held out."""
        if holdout_every <= 0:
            return list(self.views), []
        held = [v for v in self.views if is_holdout(v.frame, holdout_every)]
        train = [v for v in self.views if not is_holdout(v.frame, holdout_every)]
        return train, held


def _resize_channel(a, w, h, resample):
    return np.asarray(PILImage.fromarray(np.asarray(a, dtype=np.float32), mode="F").resize((w, h), resample),
                      dtype=np.float64)


def resize_view(v: ViewRecord, width: int, height: int) -> ViewRecord:
    """Resample a view: box filter for the image, nearest for depths and masks."""
    if (width, height) == (v.camera.width, v.camera.height):
        return v
    img = np.stack([_resize_channel(v.image.values[..., c], width, height, PILImage.BOX) for c in range(3)], -1)

    def near(a):
        return _resize_channel(a, width, height, PILImage.NEAREST)

    sky = near(v.masks.sky) > 0.5
    road = near(v.masks.road) > 0.5
    return ViewRecord(
        frame=v.frame, camera_id=v.camera_id, timestamp=v.timestamp, camera=v.camera.resized(width, height),
        image=Image(img), depth=DepthMap(near(v.depth.values)), masks=MaskSet(sky, road & ~sky),
        gt_depth=None if v.gt_depth is None else DepthMap(near(v.gt_depth.values)),
        dynamic=None if v.dynamic is None else near(v.dynamic) > 0.5)


def is_holdout(frame: int, every: int) -> bool:
    return every > 0 and (frame + 1) % every == 0


def _pose_list(t: RigidTransform) -> list[float]:
    return [float(x) for x in t.matrix()[:3].reshape(-1)]


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in ds.views:
        cdir = root / v.camera_id
        cdir.mkdir(exist_ok=True)
        stem = f"{v.frame:04d}"
        write_png(cdir / f"{stem}_image.png", v.image.values)
        write_pfm(cdir / f"{stem}_depth.pfm", v.depth.values)
        write_png(cdir / f"{stem}_sky.png", v.masks.sky)
        write_png(cdir / f"{stem}_road.png", v.masks.road)
        files = {"image": f"{v.camera_id}/{stem}_image.png", "depth": f"{v.camera_id}/{stem}_depth.pfm",
                 "sky": f"{v.camera_id}/{stem}_sky.png", "road": f"{v.camera_id}/{stem}_road.png"}
        if v.gt_depth is not None:
            write_pfm(cdir / f"{stem}_gt.pfm", v.gt_depth.values)
            files["gt_depth"] = f"{v.camera_id}/{stem}_gt.pfm"
        if v.dynamic is not None:
            write_png(cdir / f"{stem}_dynamic.png", v.dynamic)
            files["dynamic"] = f"{v.camera_id}/{stem}_dynamic.png"
        c = v.camera
        entries.append({
            "frame": v.frame, "camera": v.camera_id, "timestamp": v.timestamp,
            "intrinsics": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height},
            "pose": _pose_list(c.pose), "files": files,
        })
    manifest = {
        "frame_count": ds.frame_count,
        "views": entries,
        "tracks": {name: [_pose_list(p) for p in poses] for name, poses in ds.tracks.items()},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    views = []
    for e in manifest["views"]:
        intr = e["intrinsics"]
        cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], intr["width"], intr["height"],
                     RigidTransform.from_matrix(e["pose"]))
        f = e["files"]
        sky = read_png(root / f["sky"], mask=True)
        road = read_png(root / f["road"], mask=True)
        views.append(ViewRecord(
            frame=int(e["frame"]), camera_id=str(e["camera"]), timestamp=float(e["timestamp"]), camera=cam,
            image=Image(read_png(root / f["image"])), depth=DepthMap(read_pfm(root / f["depth"])),
            masks=MaskSet(sky, road),
            gt_depth=DepthMap(read_pfm(root / f["gt_depth"])) if "gt_depth" in f else None,
            dynamic=read_png(root / f["dynamic"], mask=True) if "dynamic" in f else None,
        ))
    tracks = {name: [RigidTransform.from_matrix(p) for p in poses] for name, poses in manifest["tracks"].items()}
    return Dataset(views, int(manifest["frame_count"]), tracks)
