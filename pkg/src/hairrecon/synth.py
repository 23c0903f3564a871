"""Procedural test scenes: a sphere bust with hair grown over a cap scalp.

Everything is analytic so the generated assets can serve as ground truth:
the bust is an exact sphere SDF, the hair occupies a spherical shell
clipped to a polar cone, strands follow the tangential downhill flow of
the sphere, and images are hard ribbon rasterizations with flat per-strand
albedo (no lighting).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import ring_cameras
from .fields import OrientGrid, SdfGrid, TriMesh, raster_depth_ids
from .strands import DEFAULT_POINTS_PER_STRAND, Hairstyle, ScalpChart, Strand, resample

Array = np.ndarray


@dataclass
class SynthSpec:
    scalp_radius: float = 0.09
    strand_count: int = 200
    strand_length: float = 0.1
    points_per_strand: int = DEFAULT_POINTS_PER_STRAND
    curliness: float = 0.3
    camera_count: int = 8
    image_size: int = 128
    shell_thickness: float = 0.05
    cap_deg: float = 70.0
    strand_width: float = 0.0025
    grid_resolution: int = 48

    def __post_init__(self):
        if self.strand_count < 1:
            raise ValueError("strand count must be positive")
        if self.points_per_strand < 2 or self.strand_length <= 0:
            raise ValueError("invalid strand geometry")

    @property
    def cap(self) -> float:
        return np.radians(self.cap_deg)

    @property
    def bbox_half(self) -> float:
        return self.scalp_radius + self.shell_thickness + 0.02

    # hair can hang below the scalp cap by roughly its arc length
    @property
    def hair_cap(self) -> float:
        extra = self.strand_length / self.scalp_radius + 0.15
        return min(self.cap + extra, 0.97 * np.pi)


def sphere_cap_chart(radius: float, cap: float, rings: int = 24,
                     sectors: int = 48) -> ScalpChart:
    """Polar cap around +z with a disc UV chart (apex at uv = (.5, .5))."""
    verts = [np.array([0.0, 0.0, radius])]
    uvs = [np.array([0.5, 0.5])]
    for i in range(1, rings + 1):
        rho = i / rings
        alpha = rho * cap
        for j in range(sectors):
            phi = 2.0 * np.pi * j / sectors
            verts.append(radius * np.array([
                np.sin(alpha) * np.cos(phi), np.sin(alpha) * np.sin(phi), np.cos(alpha)
            ]))
            uvs.append(np.array(
                [0.5 + 0.5 * rho * np.cos(phi), 0.5 + 0.5 * rho * np.sin(phi)]
            ))
    faces = []
    for j in range(sectors):
        faces.append([0, 1 + j, 1 + (j + 1) % sectors])
    for i in range(1, rings):
        b0 = 1 + (i - 1) * sectors
        b1 = 1 + i * sectors
        for j in range(sectors):
            j2 = (j + 1) % sectors
            faces.append([b0 + j, b1 + j, b1 + j2])
            faces.append([b0 + j, b1 + j2, b0 + j2])
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    n = np.cross(e1, e2)
    centers = verts[faces].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, centers) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return ScalpChart(vertices=verts, faces=faces, uv=np.array(uvs))


def uv_sphere(radius: float, rings: int = 16, sectors: int = 32) -> TriMesh:
    verts = [np.array([0.0, 0.0, radius])]
    for i in range(1, rings):
        th = np.pi * i / rings
        for j in range(sectors):
            ph = 2.0 * np.pi * j / sectors
            verts.append(radius * np.array(
                [np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]
            ))
    verts.append(np.array([0.0, 0.0, -radius]))
    last = len(verts) - 1
    faces = []
    for j in range(sectors):
        faces.append([0, 1 + j, 1 + (j + 1) % sectors])
    for i in range(1, rings - 1):
        b0 = 1 + (i - 1) * sectors
        b1 = 1 + i * sectors
        for j in range(sectors):
            j2 = (j + 1) % sectors
            faces.append([b0 + j, b1 + j, b1 + j2])
            faces.append([b0 + j, b1 + j2, b0 + j2])
    b0 = 1 + (rings - 2) * sectors
    for j in range(sectors):
        faces.append([b0 + j, last, b0 + (j + 1) % sectors])
    mesh = TriMesh(np.array(verts), np.array(faces, dtype=np.int64))
    n = mesh.face_normals()
    flip = np.einsum("ij,ij->i", n, mesh.centroids()) < 0
    f = mesh.faces.copy()
    f[flip] = f[flip][:, [0, 2, 1]]
    return TriMesh(mesh.vertices, f)


# ---------------------------------------------------------------------------
# analytic fields

def bust_distance(pts: Array, radius: float) -> Array:
    return np.linalg.norm(np.atleast_2d(pts), axis=-1) - radius


def shell_distance(pts: Array, radius: float, thickness: float, cap: float) -> Array:
    """Signed distance-like field of the hair shell (max of three bounds)."""
    pts = np.atleast_2d(pts)
    r = np.linalg.norm(pts, axis=-1)
    rs = np.maximum(r, 1e-12)
    theta = np.arccos(np.clip(pts[:, 2] / rs, -1.0, 1.0))
    return np.maximum.reduce([
        r - (radius + thickness),
        radius - r,
        (theta - cap) * rs,
    ])


def flow_dirs(pts: Array) -> Array:
    """Unit tangential downhill direction on concentric spheres."""
    pts = np.atleast_2d(pts)
    r = np.maximum(np.linalg.norm(pts, axis=-1, keepdims=True), 1e-12)
    xhat = pts / r
    up = np.zeros_like(xhat)
    up[:, 2] = 1.0
    tang = up - xhat * xhat[:, 2:3]
    n = np.linalg.norm(tang, axis=-1, keepdims=True)
    # at the poles every tangent is downhill; pick a fixed one
    fallback = np.zeros_like(tang)
    fallback[:, 0] = 1.0
    tang = np.where(n > 1e-9, tang / np.where(n > 1e-9, n, 1.0), fallback)
    return -tang


def synth_fields(spec: SynthSpec):
    """Analytic hair/bust SDF grids and the 3D direction grid."""
    h = spec.bbox_half
    res = spec.grid_resolution
    lin = np.linspace(-h, h, res)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    hair = shell_distance(nodes, spec.scalp_radius, spec.shell_thickness,
                          spec.hair_cap).reshape(res, res, res)
    bust = bust_distance(nodes, spec.scalp_radius).reshape(res, res, res)
    beta = flow_dirs(nodes).reshape(res, res, res, 3)
    bmin = np.array([-h] * 3)
    bmax = np.array([h] * 3)
    return (SdfGrid(bmin, bmax, hair), SdfGrid(bmin, bmax, bust),
            OrientGrid(bmin, bmax, beta))


# ---------------------------------------------------------------------------
# strand growth

def grow_hairstyle(spec: SynthSpec, rng: np.random.Generator) -> Hairstyle:
    """Strands following the downhill flow inside the shell.

    Zero curliness grows perfectly straight strands (tangent at the root);
    otherwise the direction relaxes toward the flow with a radial pull to
    mid-shell and an oscillating sideways wobble.
    """
    R = spec.scalp_radius
    T = spec.shell_thickness
    L = spec.points_per_strand
    h = spec.strand_length / (L - 1)
    c = spec.curliness
    strands = []
    roots_uv = np.empty((spec.strand_count, 2))
    for m in range(spec.strand_count):
        z = rng.uniform(np.cos(spec.cap), 1.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        sin_t = np.sqrt(max(1.0 - z * z, 0.0))
        xhat = np.array([sin_t * np.cos(phi), sin_t * np.sin(phi), z])
        rho = np.arccos(z) / spec.cap
        roots_uv[m] = (0.5 + 0.5 * rho * np.cos(phi), 0.5 + 0.5 * rho * np.sin(phi))
        p = R * xhat
        d = flow_dirs(p[None])[0]
        pts = [p.copy()]
        if c == 0.0:
            for k in range(1, L):
                pts.append(p + k * h * d)
        else:
            psi = rng.uniform(0.0, 2.0 * np.pi)
            omega = 2.0 * np.pi * (1.5 + 2.5 * c) / spec.strand_length
            amp = 0.8 * c
            for k in range(1, L):
                s = k * h
                xh = p / max(np.linalg.norm(p), 1e-12)
                f = flow_dirs(p[None])[0]
                side = np.cross(xh, d)
                radial = xh * (R + 0.5 * T - np.linalg.norm(p)) * (1.5 / T)
                d = d * 0.75 + f * 0.25 + side * amp * np.sin(omega * s + psi) \
                    + radial * 0.35
                d = d / max(np.linalg.norm(d), 1e-12)
                p = p + h * d
                r = np.linalg.norm(p)
                if r < R + 0.02 * T:
                    p *= (R + 0.02 * T) / r
                elif r > R + 0.98 * T:
                    p *= (R + 0.98 * T) / r
                pts.append(p.copy())
        strands.append(Strand(np.array(pts)))
    return Hairstyle(strands, roots_uv)


# ---------------------------------------------------------------------------
# rendering

HAIR_BASE = np.array([0.42, 0.30, 0.18])
BUST_COLOR = np.array([0.80, 0.66, 0.56])
BACKGROUND = np.array([0.95, 0.95, 0.97])


def ribbon_geometry(hairstyle: Hairstyle, cam_pos: Array, width: float,
                    points_per_ribbon: int = 32):
    """Camera-facing ribbon mesh for all strands -> (verts, faces, strand id per face)."""
    all_v, all_f, owner = [], [], []
    base = 0
    for si, s in enumerate(hairstyle.strands):
        pts = resample(s.points, points_per_ribbon).points \
            if len(s.points) != points_per_ribbon else s.points
        d = np.gradient(pts, axis=0)
        view = cam_pos - pts
        side = np.cross(d, view)
        n = np.linalg.norm(side, axis=1, keepdims=True)
        fallback = np.array([0.0, 0.0, 1.0])
        side = np.where(n > 1e-12, side / np.where(n > 1e-12, n, 1.0), fallback)
        side = side * (0.5 * width)
        v = np.empty((2 * len(pts), 3))
        v[0::2] = pts - side
        v[1::2] = pts + side
        k = np.arange(len(pts) - 1)
        f1 = np.column_stack([base + 2 * k, base + 2 * k + 1, base + 2 * k + 3])
        f2 = np.column_stack([base + 2 * k, base + 2 * k + 3, base + 2 * k + 2])
        all_v.append(v)
        all_f.append(np.concatenate([f1, f2]))
        owner.append(np.full(2 * len(k), si))
        base += len(v)
    return (np.concatenate(all_v), np.concatenate(all_f).astype(np.int64),
            np.concatenate(owner))


def render_views(hairstyle: Hairstyle, bust_mesh: TriMesh, cameras,
                 width: float, rng: np.random.Generator):
    """Hard flat-albedo renders -> (images, hair masks, bust masks)."""
    shade = rng.uniform(0.55, 1.45, size=len(hairstyle.strands))
    strand_rgb = np.clip(HAIR_BASE * shade[:, None], 0.0, 1.0)
    images, hair_masks, bust_masks = [], [], []
    for cam in cameras:
        hv, hf, owner = ribbon_geometry(hairstyle, cam.position, width)
        verts = np.concatenate([hv, bust_mesh.vertices])
        faces = np.concatenate([hf, bust_mesh.faces + len(hv)])
        _, fid = raster_depth_ids(verts, faces, cam)
        img = np.broadcast_to(BACKGROUND, (cam.height, cam.width, 3)).copy()
        hair_px = (fid >= 0) & (fid < len(hf))
        bust_px = fid >= len(hf)
        img[bust_px] = BUST_COLOR
        img[hair_px] = strand_rgb[owner[fid[hair_px]]]
        images.append(img)
        hair_masks.append(hair_px.astype(np.float64))
        bust_masks.append(bust_px.astype(np.float64))
    return images, hair_masks, bust_masks


def synth_scene(spec: SynthSpec, seed: int = 0, with_orientation: bool = True):
    """Complete scene bundle plus analytic field grids.

    Returns (SceneBundle, hair SdfGrid, bust SdfGrid, OrientGrid).
    """
    from .orient2d import gabor_bank, orientation_map
    from .scene import SceneBundle

    rng = np.random.default_rng(seed)
    chart = sphere_cap_chart(spec.scalp_radius, spec.cap)
    bust_mesh = uv_sphere(spec.scalp_radius, rings=24, sectors=48)
    hairstyle = grow_hairstyle(spec, rng)
    cams = ring_cameras(np.zeros(3), 3.8 * spec.scalp_radius, spec.camera_count,
                        12.0, 55.0, spec.image_size, spec.image_size)
    images, hair_masks, bust_masks = render_views(
        hairstyle, bust_mesh, cams, spec.strand_width, rng)
    orient = None
    if with_orientation:
        bank = gabor_bank()
        gray = [im.mean(axis=2) for im in images]
        orient = [orientation_map(g, bank) for g in gray]
    bundle = SceneBundle(cams, images, hair_masks, bust_masks, chart,
                         orient_maps=orient, gt=hairstyle)
    hair_grid, bust_grid, beta_grid = synth_fields(spec)
    return bundle, hair_grid, bust_grid, beta_grid
