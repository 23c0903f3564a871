"""Scene directory ingestion and emission.

A scene is a flat directory:

    cameras.json      {"cameras": [{intrinsics, world_to_cam, size}, ...]}
    view_XXX.png      RGB image per camera (XXX = zero-padded index)
    hair_XXX.png      hair matte, grayscale
    bust_XXX.png      bust matte, grayscale
    orient_XXX.ornt   per-pixel orientation map (optional until computed)
    scalp.strd-mesh   text mesh: "v x y z u v" and "f i j k" lines (0-based)
    gt.strd           ground-truth strands (optional)

Images are exchanged as float arrays in [0,1]; writing quantizes to 8-bit.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .cameras import Camera
from .formats import read_ornt, read_strd, write_ornt, write_strd
from .strands import ScalpChart, Hairstyle, Strand

Array = np.ndarray


def read_png(path: str) -> Array:
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return img


def write_png(path: str, data: Array):
    arr = np.clip(np.asarray(data), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_scalp_mesh(path: str, chart: ScalpChart):
    with open(path, "w") as f:
        for p, uv in zip(chart.vertices, chart.uv):
            f.write("v %.17g %.17g %.17g %.17g %.17g\n" % (p[0], p[1], p[2], uv[0], uv[1]))
        for tri in chart.faces:
            f.write("f %d %d %d\n" % (tri[0], tri[1], tri[2]))


def read_scalp_mesh(path: str) -> ScalpChart:
    verts, uvs, faces = [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) != 6:
                    raise ValueError(f"{path}:{ln}: vertex line needs x y z u v")
                verts.append([float(x) for x in parts[1:4]])
                uvs.append([float(x) for x in parts[4:6]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{ln}: face line needs three indices")
                faces.append([int(x) for x in parts[1:4]])
            else:
                raise ValueError(f"{path}:{ln}: unknown record {parts[0]!r}")
    if not verts or not faces:
        raise ValueError(f"{path}: empty mesh")
    return ScalpChart(np.array(verts), np.array(faces, dtype=np.int64), np.array(uvs))


@dataclass
class SceneBundle:
    cameras: list
    images: list          # (H, W, 3) float per view
    hair_masks: list      # (H, W) float
    bust_masks: list      # (H, W) float
    scalp: ScalpChart
    orient_maps: list | None = None  # per view (angle, variance) or None
    gt: Hairstyle | None = None

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("scene needs at least one view")
        shape = self.images[0].shape[:2]
        for name, seq in (("image", self.images), ("hair mask", self.hair_masks),
                          ("bust mask", self.bust_masks)):
            if len(seq) != len(self.cameras):
                raise ValueError(f"{name} count does not match camera count")
            for a in seq:
                if a.shape[:2] != shape:
                    raise ValueError(f"{name} dimensions differ across views")

    @property
    def image_size(self):
        h, w = self.images[0].shape[:2]
        return w, h


def _view_path(scene_dir: str, stem: str, index: int, ext: str) -> str:
    return os.path.join(scene_dir, f"{stem}_{index:03d}.{ext}")


def save_scene(scene_dir: str, bundle: SceneBundle):
    os.makedirs(scene_dir, exist_ok=True)
    cams = {"cameras": [c.to_dict() for c in bundle.cameras]}
    with open(os.path.join(scene_dir, "cameras.json"), "w") as f:
        json.dump(cams, f, indent=1)
    for i in range(len(bundle.cameras)):
        write_png(_view_path(scene_dir, "view", i, "png"), bundle.images[i])
        write_png(_view_path(scene_dir, "hair", i, "png"), bundle.hair_masks[i])
        write_png(_view_path(scene_dir, "bust", i, "png"), bundle.bust_masks[i])
        if bundle.orient_maps is not None and bundle.orient_maps[i] is not None:
            angle, var = bundle.orient_maps[i]
            write_ornt(_view_path(scene_dir, "orient", i, "ornt"), angle, var)
    write_scalp_mesh(os.path.join(scene_dir, "scalp.strd-mesh"), bundle.scalp)
    if bundle.gt is not None:
        write_strd(os.path.join(scene_dir, "gt.strd"),
                   [s.points for s in bundle.gt.strands], bundle.gt.roots)


def load_scene(scene_dir: str, need_orient: bool = False) -> SceneBundle:
    cam_path = os.path.join(scene_dir, "cameras.json")
    if not os.path.isfile(cam_path):
        raise ValueError(f"missing camera file: {cam_path}")
    with open(cam_path) as f:
        cams = [Camera.from_dict(d) for d in json.load(f)["cameras"]]
    images, hair, bust, orient = [], [], [], []
    for i in range(len(cams)):
        for stem, into in (("view", images), ("hair", hair), ("bust", bust)):
            p = _view_path(scene_dir, stem, i, "png")
            if not os.path.isfile(p):
                raise ValueError(f"missing view asset: {p}")
            a = read_png(p)
            into.append(a if stem == "view" else np.atleast_2d(a))
        po = _view_path(scene_dir, "orient", i, "ornt")
        if os.path.isfile(po):
            orient.append(read_ornt(po))
        elif need_orient:
            raise ValueError(f"missing orientation map: {po}")
        else:
            orient.append(None)
    scalp_path = os.path.join(scene_dir, "scalp.strd-mesh")
    if not os.path.isfile(scalp_path):
        raise ValueError(f"missing scalp mesh: {scalp_path}")
    scalp = read_scalp_mesh(scalp_path)
    gt = None
    gt_path = os.path.join(scene_dir, "gt.strd")
    if os.path.isfile(gt_path):
        pts, roots = read_strd(gt_path)
        gt = Hairstyle([Strand(p) for p in pts], roots)
    return SceneBundle(cams, images, hair, bust, scalp,
                       orient_maps=orient, gt=gt)
