"""Strand and hairstyle data model.

Strands are polylines of L 3D points (meters), either in the world frame or
in a tbn-local frame rooted at the origin of a scalp TBN basis.  Offsets
between consecutive points are the quantities the strand codec decodes;
curvature is the cross-product magnitude of consecutive unit segment
directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

WORLD = "world"
LOCAL = "tbn-local"

DEFAULT_POINTS_PER_STRAND = 100


@dataclass
class Strand:
    points: Array  # (L, 3)
    frame: str = WORLD

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 2:
            raise ValueError("strand needs (L>=2, 3) points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("strand has non-finite coordinates")

    @property
    def length(self) -> int:
        return len(self.points)


@dataclass
class SegmentDirs:
    dirs: Array  # (L-1, 3) unit
    raw: Array   # (L-1, 3) offsets points[l+1] - points[l]


@dataclass
class Hairstyle:
    strands: list
    roots: Array | None = None  # (M, 2) UV per strand, optional

    def __post_init__(self):
        if self.roots is not None:
            self.roots = np.asarray(self.roots, dtype=np.float64)
            if len(self.roots) != len(self.strands):
                raise ValueError("one root UV per strand required")

    def __len__(self):
        return len(self.strands)

    def points_array(self) -> Array:
        """(M, L, 3) stack; strands must share L."""
        return np.stack([s.points for s in self.strands])


@dataclass
class TbnFrame:
    origin: Array
    tangent: Array
    bitangent: Array
    normal: Array

    def rotation(self) -> Array:
        """World-to-local rotation; rows are the frame axes."""
        return np.stack([self.tangent, self.bitangent, self.normal])


@dataclass
class ScalpChart:
    """Triangle mesh restricted to the scalp with per-vertex UV in [0,1]^2."""

    vertices: Array  # (V, 3)
    faces: Array     # (F, 3) int
    uv: Array        # (V, 2)
    _uv_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)

    def face_uv_matrices(self):
        """Cached per-face inverse UV edge matrices for point location."""
        if "inv" not in self._uv_cache:
            uv0 = self.uv[self.faces[:, 0]]
            e1 = self.uv[self.faces[:, 1]] - uv0
            e2 = self.uv[self.faces[:, 2]] - uv0
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            det = np.where(np.abs(det) < 1e-18, 1e-18, det)
            # inverse of [[e1x, e2x], [e1y, e2y]] per face
            inv = np.empty((len(self.faces), 2, 2))
            inv[:, 0, 0] = e2[:, 1] / det
            inv[:, 0, 1] = -e2[:, 0] / det
            inv[:, 1, 0] = -e1[:, 1] / det
            inv[:, 1, 1] = e1[:, 0] / det
            self._uv_cache["inv"] = inv
            self._uv_cache["uv0"] = uv0
        return self._uv_cache["uv0"], self._uv_cache["inv"]

    def locate(self, uv) -> tuple[int, Array]:
        """Containing face and barycentrics for a UV point.

        Chooses the face with the smallest barycentric slack; ties break to
        the lowest face index.  Raises if the chart does not cover uv.
        """
        uv = np.asarray(uv, dtype=np.float64)
        uv0, inv = self.face_uv_matrices()
        d = uv[None, :] - uv0
        st = np.einsum("fij,fj->fi", inv, d)
        bary = np.column_stack([1.0 - st[:, 0] - st[:, 1], st[:, 0], st[:, 1]])
        slack = -bary.min(axis=1)
        fi = int(np.argmin(slack))
        if slack[fi] > 1e-9:
            raise ValueError(f"uv {uv} outside chart coverage")
        return fi, bary[fi]

    def surface_point(self, uv) -> Array:
        fi, bary = self.locate(uv)
        return bary @ self.vertices[self.faces[fi]]


def segment_dirs(strand: Strand) -> SegmentDirs:
    raw = np.diff(strand.points, axis=0)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-length segment: direction undefined")
    return SegmentDirs(dirs=raw / norms[:, None], raw=raw)


def curvature(strand: Strand) -> Array:
    """g^l = |b^l x b^{l+1}| over consecutive unit segment directions."""
    if strand.length < 3:
        raise ValueError("curvature needs L >= 3")
    b = segment_dirs(strand).dirs
    return np.linalg.norm(np.cross(b[:-1], b[1:]), axis=1)


def resample(polyline, L: int) -> Strand:
    """Resample to L points spaced by equal arc-length fractions."""
    pts = np.asarray(polyline, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("need at least 2 points")
    if L < 2:
        raise ValueError("L must be >= 2")
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seglen.sum()
    if total == 0.0:
        raise ValueError("degenerate zero-length polyline")
    if L == len(pts):
        # matching count is an exact no-op, which also makes repeated
        # resampling at a fixed L stable on curved polylines
        return Strand(pts.copy(), frame=WORLD)
    t = np.concatenate([[0.0], np.cumsum(seglen)])
    s = np.linspace(0.0, total, L)
    out = np.empty((L, 3))
    for k in range(3):
        out[:, k] = np.interp(s, t, pts[:, k])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Strand(out, frame=WORLD)


def tbn_frame(chart: ScalpChart, uv) -> TbnFrame:
    """TBN basis at a chart point: tangent follows the UV u-direction."""
    fi, bary = chart.locate(uv)
    tri = chart.faces[fi]
    v = chart.vertices[tri]
    origin = bary @ v
    e1, e2 = v[1] - v[0], v[2] - v[0]
    n = np.cross(e1, e2)
    n = n / np.linalg.norm(n)
    # 3D direction of increasing u on this face
    duv1 = chart.uv[tri[1]] - chart.uv[tri[0]]
    duv2 = chart.uv[tri[2]] - chart.uv[tri[0]]
    det = duv1[0] * duv2[1] - duv1[1] * duv2[0]
    du = (duv2[1] * e1 - duv1[1] * e2) / det
    t = du - (du @ n) * n
    t = t / np.linalg.norm(t)
    b = np.cross(n, t)
    return TbnFrame(origin=origin, tangent=t, bitangent=b, normal=n)


def to_local(strand: Strand, frame: TbnFrame) -> Strand:
    if strand.frame != WORLD:
        raise ValueError("to_local expects a world-frame strand")
    R = frame.rotation()
    pts = (strand.points - frame.origin) @ R.T
    return Strand(pts, frame=LOCAL)


def from_local(strand: Strand, frame: TbnFrame) -> Strand:
    if strand.frame != LOCAL:
        raise ValueError("from_local expects a tbn-local strand")
    R = frame.rotation()
    pts = strand.points @ R + frame.origin
    return Strand(pts, frame=WORLD)


def accumulate(offsets) -> Strand:
    """Offsets (L-1, 3) -> tbn-local strand with p^1 = 0."""
    offsets = np.asarray(offsets, dtype=np.float64)
    pts = np.concatenate([np.zeros((1, 3)), np.cumsum(offsets, axis=0)])
    return Strand(pts, frame=LOCAL)


def _arc_fractions(points: Array) -> Array:
    seglen = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seglen.sum()
    if total == 0.0:
        return np.linspace(0.0, 1.0, len(points))
    return np.concatenate([[0.0], np.cumsum(seglen)]) / total


def augment(strand: Strand, kind: str, **params) -> Strand:
    """Data augmentations in the tbn-local frame; the root stays at origin.

    kinds: flip | stretch(factor) | rotate_normal(angle) |
           curl(amplitude, frequency) | cut(fraction)
    """
    if strand.frame != LOCAL:
        raise ValueError("augment expects a tbn-local strand")
    pts = strand.points.copy()
    if kind == "flip":
        # mirror across the bitangent-normal plane (tangent axis negated)
        pts[:, 0] = -pts[:, 0]
    elif kind == "stretch":
        factor = params["factor"]
        if factor <= 0:
            raise ValueError("stretch factor must be positive")
        pts = pts * factor
    elif kind == "rotate_normal":
        a = params["angle"]
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pts = pts @ R.T
    elif kind == "curl":
        a, k = params["amplitude"], params["frequency"]
        chord = pts[-1] - pts[0]
        cn = np.linalg.norm(chord)
        axis = chord / cn if cn > 1e-12 else np.array([0.0, 0.0, 1.0])
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        t1 = np.cross(axis, helper)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(axis, t1)
        t = _arc_fractions(pts)
        disp = a * (np.sin(k * t)[:, None] * t1 + np.cos(k * t)[:, None] * t2)
        pts = pts + disp * t[:, None]  # taper to 0 at the root
    elif kind == "cut":
        f = params["fraction"]
        keep = max(2, int(np.ceil(f * len(pts))))
        pts = resample(pts[:keep], len(pts)).points
    else:
        raise ValueError(f"unknown augmentation {kind!r}")
    return Strand(pts, frame=LOCAL)
