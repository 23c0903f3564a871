"""Regular-grid fields (signed distance, 3D orientation) and mesh utilities.

Grid node (i, j, k) sits at ``bbox_min + (i, j, k) * cell`` with
``cell = (bbox_max - bbox_min) / (resolution - 1)``; values are indexed
``[ix, iy, iz]`` (vector grids append a trailing channel axis).  Queries are
trilinear.  Signed-distance queries outside the box return the clamped
boundary value plus the euclidean distance to the box, which keeps the field
a valid lower bound for sphere tracing.

Sampling is exposed twice: plain numpy (``SdfGrid.sample``) and as tape
operations (:func:`grid_sample`, :func:`grid_spatial_gradient`) that are
differentiable in the node values and, for the former, in the query
positions.  Both share one weight routine so they cannot drift apart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import adtape as t
from .adtape import Var

Array = np.ndarray

# corner offsets of one cell, order fixed (x slowest) and relied on below
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def _trilinear(bbox_min, cell, res, pts):
    """Weights for trilinear interpolation at `pts` (P, 3).

    Returns (flat corner indices (P, 8), weights (P, 8),
    d(weights)/d(position) (P, 8, 3), per-axis inside gate (P, 3)).
    Out-of-range queries are clamped; the position derivative is gated to
    zero along clamped axes.
    """
    u = (pts - bbox_min) / cell
    hi = res.astype(np.float64) - 1.0
    gate = (u > 0.0) & (u < hi)
    uc = np.clip(u, 0.0, hi)
    base = np.minimum(np.floor(uc), res - 2).astype(np.int64)
    f = uc - base
    idx3 = base[:, None, :] + _CORNERS[None, :, :]
    flat = (idx3[..., 0] * res[1] + idx3[..., 1]) * res[2] + idx3[..., 2]

    w1 = np.stack([1.0 - f, f], axis=-1)          # (P, 3, 2)
    wsel = np.empty(flat.shape + (3,))
    for ax in range(3):
        wsel[:, :, ax] = w1[:, ax, _CORNERS[:, ax]]
    dsign = np.where(_CORNERS == 0, -1.0, 1.0)    # (8, 3)
    w8 = wsel[:, :, 0] * wsel[:, :, 1] * wsel[:, :, 2]
    dw8 = np.empty_like(wsel)
    scale = gate.astype(np.float64) / cell
    dw8[:, :, 0] = dsign[:, 0] * wsel[:, :, 1] * wsel[:, :, 2] * scale[:, None, 0]
    dw8[:, :, 1] = dsign[:, 1] * wsel[:, :, 0] * wsel[:, :, 2] * scale[:, None, 1]
    dw8[:, :, 2] = dsign[:, 2] * wsel[:, :, 0] * wsel[:, :, 1] * scale[:, None, 2]
    return flat, w8, dw8, gate


class _Grid:
    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("bbox_max must exceed bbox_min per axis")
        if any(n < 2 for n in self.values.shape[:3]):
            raise ValueError("grid needs at least 2 nodes per axis")

    @property
    def resolution(self) -> Array:
        return np.array(self.values.shape[:3], dtype=np.int64)

    @property
    def cell(self) -> Array:
        return (self.bbox_max - self.bbox_min) / (self.resolution - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def outside(self, pts: Array) -> Array:
        pts = np.atleast_2d(pts)
        return np.any((pts < self.bbox_min) | (pts > self.bbox_max), axis=-1)

    def _interp(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        flat, w8, dw8, _ = _trilinear(self.bbox_min, self.cell, self.resolution, pts)
        vals = self.values.reshape(-1, *self.values.shape[3:])
        corner = vals[flat]                       # (P, 8[, C])
        if corner.ndim == 2:
            v = (w8 * corner).sum(axis=1)
            g = np.einsum("pka,pk->pa", dw8, corner)
        else:
            v = np.einsum("pk,pkc->pc", w8, corner)
            g = np.einsum("pka,pkc->pca", dw8, corner)
        return v, g


@dataclass
class SdfGrid(_Grid):
    """Scalar signed-distance samples on a regular lattice."""

    bbox_min: Array
    bbox_max: Array
    values: Array  # (nx, ny, nz)

    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 3:
            raise ValueError("SdfGrid values must be (nx, ny, nz)")

    def sample(self, pts, with_gradient: bool = False):
        """Trilinear SDF at world points; outside adds distance to the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        v, g = self._interp(pts)
        clamped = np.clip(pts, self.bbox_min, self.bbox_max)
        d = pts - clamped
        dist = np.linalg.norm(d, axis=-1)
        out = dist > 0
        v = v + dist
        if not with_gradient:
            return v
        g = g.copy()
        g[out] += d[out] / dist[out, None]
        return v, g


@dataclass
class OrientGrid(_Grid):
    """3D unit-direction samples on a regular lattice (trailing axis xyz)."""

    bbox_min: Array
    bbox_max: Array
    values: Array  # (nx, ny, nz, 3)

    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 4 or self.values.shape[3] != 3:
            raise ValueError("OrientGrid values must be (nx, ny, nz, 3)")

    def sample(self, pts, with_gradient: bool = False):
        v, g = self._interp(pts)
        if with_gradient:
            return v, g
        return v


# ---------------------------------------------------------------------------
# tape operations

def _grid_geometry(grid, bbox_min, bbox_max):
    val = grid.value if isinstance(grid, Var) else np.asarray(grid)
    res = np.array(val.shape[:3], dtype=np.int64)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    cell = (bbox_max - bbox_min) / (res - 1)
    return val, res, cell, bbox_min


def grid_sample(grid, pts, bbox_min, bbox_max) -> Var:
    """Trilinear sample on the tape.

    `grid` (nx, ny, nz[, C]) and/or `pts` (P, 3) may be Vars; the result is
    (P,) or (P, C).  Out-of-box queries clamp (position gradient gated to
    zero along clamped axes); signed-distance callers add the outside
    distance themselves, see :func:`sdf_sample`.
    """
    tape = t._tape_of(grid, pts)
    gv, res, cell, bmin = _grid_geometry(grid, bbox_min, bbox_max)
    pv = pts.value if isinstance(pts, Var) else np.atleast_2d(np.asarray(pts))
    flat, w8, dw8, _ = _trilinear(bmin, cell, res, pv)
    scalar = gv.ndim == 3
    theta = gv.reshape(-1, 1) if scalar else gv.reshape(-1, gv.shape[3])
    corner = theta[flat]                          # (P, 8, C)
    out = np.einsum("pk,pkc->pc", w8, corner)
    parents = []
    if isinstance(grid, Var):
        def vjp_grid(g):
            g2 = g.reshape(out.shape)
            acc = np.empty_like(theta)
            fl = flat.ravel()
            for c in range(theta.shape[1]):
                contrib = (w8 * g2[:, c:c + 1]).ravel()
                acc[:, c] = np.bincount(fl, weights=contrib, minlength=theta.shape[0])
            return acc.reshape(gv.shape)

        parents.append((grid.index, vjp_grid))
    if isinstance(pts, Var):
        def vjp_pts(g):
            g2 = g.reshape(out.shape)
            gw = np.einsum("pkc,pc->pk", corner, g2)
            return np.einsum("pka,pk->pa", dw8, gw)

        parents.append((pts.index, vjp_pts))
    return tape._record("grid_sample", out[:, 0] if scalar else out, parents)


def grid_spatial_gradient(grid: Var, pts, bbox_min, bbox_max) -> Var:
    """Field gradient of a scalar grid at constant points, on the tape.

    Linear in the node values ((P, 3) out); `pts` must not be a Var, sample
    locations are treated as constants of the iteration.
    """
    if isinstance(pts, Var):
        raise TypeError("grid_spatial_gradient treats points as constants")
    gv = grid.value
    if gv.ndim != 3:
        raise ValueError("spatial gradient is defined for scalar grids")
    _, res, cell, bmin = _grid_geometry(grid, bbox_min, bbox_max)
    pv = np.atleast_2d(np.asarray(pts))
    flat, _, dw8, _ = _trilinear(bmin, cell, res, pv)
    theta = gv.reshape(-1)
    out = np.einsum("pka,pk->pa", dw8, theta[flat])

    def vjp(g):
        g2 = g.reshape(out.shape)
        contrib = np.einsum("pka,pa->pk", dw8, g2)
        acc = np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=theta.size)
        return acc.reshape(gv.shape)

    return grid.tape._record("grid_grad", out, [(grid.index, vjp)])


def sdf_sample(grid, pts, bbox_min, bbox_max) -> Var:
    """SDF value at sample points: clamped sample + distance to box.

    Either the grid, the points, or both may be tape variables.
    """
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    if isinstance(pts, Var):
        pc = t.clamp(pts, bbox_min, bbox_max)
        d = pts - pc
        s = (d * d).sum(axis=-1)
        outside = np.any((pts.value < bbox_min) | (pts.value > bbox_max), axis=-1)
        dist = t.where(outside, t.sqrt(s + 1e-24), 0.0)
        return grid_sample(grid, pc, bbox_min, bbox_max) + dist
    pts = np.asarray(pts, dtype=np.float64)
    pc = np.clip(pts, bbox_min, bbox_max)
    dist = np.sqrt(((pts - pc) ** 2).sum(axis=-1))
    return grid_sample(grid, pc, bbox_min, bbox_max) + dist


def eikonal_residual(grid: SdfGrid, pts) -> Array:
    """Per-point (|grad f| - 1)^2, plain numpy."""
    _, g = grid.sample(pts, with_gradient=True)
    return (np.linalg.norm(g, axis=-1) - 1.0) ** 2


def ray_box_intersection(origins, dirs, bbox_min, bbox_max):
    """Slab test.  Returns (t_near, t_far, hit); t_near clamped to >= 0."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bbox_min - origins) * inv
        t1 = (bbox_max - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # parallel-to-slab rays: the slab constrains nothing if the origin is
    # inside it, everything if outside
    par = dirs == 0.0
    inside = (origins >= bbox_min) & (origins <= bbox_max)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far, t_far > t_near


# ---------------------------------------------------------------------------
# triangle meshes

@dataclass
class TriMesh:
    vertices: Array  # (V, 3)
    faces: Array     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def corners(self) -> Array:
        return self.vertices[self.faces]  # (F, 3, 3)

    def face_normals(self) -> Array:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        ln = np.linalg.norm(n, axis=-1, keepdims=True)
        return n / np.maximum(ln, 1e-30)

    def face_areas(self) -> Array:
        c = self.corners
        return 0.5 * np.linalg.norm(
            np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=-1
        )

    def centroids(self) -> Array:
        return self.corners.mean(axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def submesh(self, face_mask: Array) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[np.asarray(face_mask)])

    def sample_surface(self, count: int, rng: np.random.Generator):
        """Area-weighted uniform surface samples -> (points, face indices)."""
        areas = self.face_areas()
        p = areas / areas.sum()
        fi = rng.choice(len(self.faces), size=count, p=p)
        c = self.corners[fi]
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        a = 1.0 - r1
        b = r1 * (1.0 - r2)
        g = r1 * r2
        pts = a[:, None] * c[:, 0] + b[:, None] * c[:, 1] + g[:, None] * c[:, 2]
        return pts, fi


def marching_cubes(grid: SdfGrid) -> TriMesh:
    """Extract the zero level set; raises if the field never changes sign."""
    from skimage import measure

    v = grid.values
    if v.min() >= 0.0 or v.max() <= 0.0:
        raise ValueError("field has no zero crossing")
    verts, faces, _, _ = measure.marching_cubes(
        v, level=0.0, spacing=tuple(grid.cell)
    )
    verts = np.asarray(verts, dtype=np.float64) + grid.bbox_min
    mesh = TriMesh(verts, faces)
    keep = mesh.face_areas() > 1e-14 * grid.diagonal ** 2
    return TriMesh(verts, mesh.faces[keep])


def closest_point_on_triangles(p: Array, tri: Array) -> Array:
    """Closest point on triangle i to point i; both stacked (M, ...).

    The closest point is either the in-plane projection (when its
    barycentrics are nonnegative) or lies on one of the three clamped
    edges; take the nearest of the valid candidates.
    """
    p = np.atleast_2d(p)
    A, B, C = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = B - A, C - A
    n = np.cross(ab, ac)
    nn = (n * n).sum(-1)
    ap = p - A
    # barycentrics of the plane projection via the metric tensor
    d00 = (ab * ab).sum(-1)
    d01 = (ab * ac).sum(-1)
    d11 = (ac * ac).sum(-1)
    d20 = (ap * ab).sum(-1)
    d21 = (ap * ac).sum(-1)
    denom = d00 * d11 - d01 * d01
    ok = denom > 1e-30
    vb = np.where(ok, (d11 * d20 - d01 * d21) / np.where(ok, denom, 1.0), -1.0)
    wb = np.where(ok, (d00 * d21 - d01 * d20) / np.where(ok, denom, 1.0), -1.0)
    inside = (vb >= 0) & (wb >= 0) & (vb + wb <= 1)
    plane_pt = A + vb[:, None] * ab + wb[:, None] * ac

    best = np.where(inside[:, None], plane_pt, np.inf)
    best_d = np.where(inside, ((p - plane_pt) ** 2).sum(-1), np.inf)
    for P0, P1 in ((A, B), (B, C), (C, A)):
        e = P1 - P0
        ee = (e * e).sum(-1)
        u = ((p - P0) * e).sum(-1) / np.maximum(ee, 1e-30)
        u = np.clip(u, 0.0, 1.0)
        cand = P0 + u[:, None] * e
        d = ((p - cand) ** 2).sum(-1)
        take = d < best_d
        best = np.where(take[:, None], cand, best)
        best_d = np.where(take, d, best_d)
    return best


def mesh_distances(pts: Array, mesh: TriMesh):
    """Exact point-to-mesh distance, closest point, and face index.

    Candidate faces come from a centroid KD-tree ball query padded by the
    largest face circumradius, which cannot exclude the true minimizer.
    """
    pts = np.atleast_2d(pts)
    cent = mesh.centroids()
    c = mesh.corners
    circum = np.linalg.norm(c - cent[:, None, :], axis=-1).max(axis=1)
    pad = circum.max() + 1e-12
    tree = cKDTree(cent)
    d0, _ = tree.query(pts, k=1)
    balls = tree.query_ball_point(pts, d0 + pad + 1e-12)
    counts = np.array([len(b) for b in balls])
    qi = np.repeat(np.arange(len(pts)), counts)
    fi = np.concatenate(balls).astype(np.int64) if counts.sum() else np.empty(0, np.int64)
    cp = closest_point_on_triangles(pts[qi], c[fi])
    d2 = ((pts[qi] - cp) ** 2).sum(-1)
    perm = np.lexsort((d2, qi))
    first = np.ones(len(perm), dtype=bool)
    first[1:] = qi[perm][1:] != qi[perm][:-1]
    win = perm[first]
    best_d = np.sqrt(d2[win])
    return best_d, cp[win], fi[win]


# ---------------------------------------------------------------------------
# hard z-buffer rasterization and visibility selection

def raster_depth_ids(vertices: Array, faces: Array, cam, size: int | None = None):
    """Z-buffered face ids at pixel centers.

    Returns (depth (H, W), face id (H, W), -1 where empty).  `size`
    overrides the camera's raster resolution (intrinsics rescaled).
    """
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    w, h = cam.width, cam.height
    if size is not None:
        fx, cx = fx * size / w, cx * size / w
        fy, cy = fy * size / h, cy * size / h
        w = h = size
    pc = vertices @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    u = fx * pc[:, 0] / np.where(z > 0, z, 1.0) + cx
    v = fy * pc[:, 1] / np.where(z > 0, z, 1.0) + cy
    depth = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int64)
    for i, f in enumerate(faces):
        zf = z[f]
        if np.any(zf <= 1e-9):
            continue
        uf, vf = u[f], v[f]
        x0 = max(int(np.floor(uf.min() - 0.5)), 0)
        x1 = min(int(np.ceil(uf.max() - 0.5)) + 1, w)
        y0 = max(int(np.floor(vf.min() - 0.5)), 0)
        y1 = min(int(np.ceil(vf.max() - 0.5)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(px, py)
        d = (vf[1] - vf[2]) * (uf[0] - uf[2]) + (uf[2] - uf[1]) * (vf[0] - vf[2])
        if abs(d) < 1e-12:
            continue
        l0 = ((vf[1] - vf[2]) * (gx - uf[2]) + (uf[2] - uf[1]) * (gy - vf[2])) / d
        l1 = ((vf[2] - vf[0]) * (gx - uf[2]) + (uf[0] - uf[2]) * (gy - vf[2])) / d
        l2 = 1.0 - l0 - l1
        ins = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not ins.any():
            continue
        # perspective-correct depth from screen barycentrics
        zi = 1.0 / (l0 / zf[0] + l1 / zf[1] + l2 / zf[2])
        win = ins & (zi < depth[y0:y1, x0:x1])
        depth[y0:y1, x0:x1][win] = zi[win]
        fid[y0:y1, x0:x1][win] = i
    return depth, fid


def visible_faces(hair: TriMesh, bust: TriMesh, cameras, size: int = 512) -> Array:
    """Faces of `hair` that win the depth test in at least one camera.

    The bust participates as an opaque occluder.  More cameras can only
    grow the returned mask.
    """
    verts = np.concatenate([hair.vertices, bust.vertices])
    faces = np.concatenate([hair.faces, bust.faces + len(hair.vertices)])
    nh = len(hair.faces)
    mask = np.zeros(nh, dtype=bool)
    for cam in cameras:
        _, fid = raster_depth_ids(verts, faces, cam, size=size)
        ids = np.unique(fid[(fid >= 0) & (fid < nh)])
        mask[ids] = True
    return mask
