"""Strand-level fitting: decode a geometry texture into strands, score them
against the coarse fields and the captured views, and optimize the texture.

The loop alternates four ingredients:

  * volume / coverage / orientation losses against the frozen coarse grids,
  * a soft-rasterized silhouette and color term against the input views,
  * a denoising-prior pull on the texture itself,
  * Adam with milestone-decayed learning rate on the texture parameters.

All losses exist twice: a plain-numpy form that states the contract (and is
what oracles are checked against) and a tape form used inside the loop.
Discrete choices (inside/outside, nearest strand point, near-surface
selection) are frozen at the current values before the tape sees them, so
the backward pass differentiates a fixed selection.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import adtape as t
from .adtape import Tape, Var
from .fields import (OrientGrid, SdfGrid, TriMesh, marching_cubes,
                     mesh_distances, raster_depth_ids, sdf_sample,
                     grid_sample, visible_faces)
from .formats import write_strd
from .optim import Adam, multistep_lr
from .priors import GeometryTexture, prior_gradient, FULL_BACKPROP
from .softras import SoftRasterSettings, soft_render, strand_segments
from .strands import Hairstyle, ScalpChart, Strand, WORLD

Array = np.ndarray

DIRECT = "direct"
EVALUATOR = "evaluator"

# orientation-field lookups and segment directions are normalized with this
# additive floor under the square root
NORM_FLOOR = 1e-16


@dataclass
class FitConfig:
    """Loss weights and loop sizes for the strand-fitting stage."""

    lambda_chm: float = 1.0
    lambda_orient: float = 0.01
    lambda_render: float = 1e-3
    lambda_prior: float = 1e-3
    lambda_mask: float = 0.01
    strands_per_iter: int = 512
    surface_samples: int = 2048
    tau: float | None = None          # meters; None -> 5x coarse grid cell
    learning_rate: float = 1e-3
    milestones: tuple = (40_000, 60_000, 80_000)
    gamma_lr: float = 0.5
    iterations: int = 3000
    texture_size: int = 256
    strand_width: float = 0.0025
    prior_draws: int = 1
    visibility_raster: int = 256
    seed: int = 0
    raster: SoftRasterSettings = field(default_factory=lambda: SoftRasterSettings(
        sigma=1e-4, gamma=1e-4, blur=1e-3, max_fragments=8))

    def __post_init__(self):
        for name in ("lambda_chm", "lambda_orient", "lambda_render",
                     "lambda_prior", "lambda_mask"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")


class TextureParam:
    """Optimizable geometry texture.

    `direct` mode owns the texels themselves; `evaluator` mode owns the
    weights of a small convolutional network that maps a fixed coordinate
    grid to the texels, so smoothness comes from the parameterization
    rather than an explicit regularizer.  Either way each query produces a
    full (height, width, channels) texture.
    """

    def __init__(self, height: int, width: int, channels: int,
                 mode: str = DIRECT, hidden: int = 16, rng=None):
        if mode not in (DIRECT, EVALUATOR):
            raise ValueError(f"unknown texture mode {mode!r}")
        self.height, self.width, self.channels = height, width, channels
        self.mode = mode
        if mode == DIRECT:
            self.weights = {"texels": np.zeros((height, width, channels))}
            return
        rng = np.random.default_rng(rng)
        u = (np.arange(width) + 0.5) / width
        v = (np.arange(height) + 0.5) / height
        gu, gv = np.meshgrid(u, v)
        feats = [gu, gv, np.sin(2 * np.pi * gu), np.cos(2 * np.pi * gu),
                 np.sin(2 * np.pi * gv), np.cos(2 * np.pi * gv)]
        self.grid = np.stack(feats)[None]           # (1, 6, H, W)
        cin = self.grid.shape[1]
        self.weights = {
            "w1": rng.standard_normal((hidden, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9)),
            "b1": np.zeros(hidden),
            # small output init: the texture starts near zero either way
            "w2": rng.standard_normal((channels, hidden, 3, 3))
            * np.sqrt(2.0 / (hidden * 9)) * 0.05,
            "b2": np.zeros(channels),
        }

    def leaf_params(self, tape: Tape) -> dict:
        return {k: tape.leaf(v) for k, v in self.weights.items()}

    def texture_tape(self, P: dict) -> Var:
        """Texture as a (H, W, C) variable of the given leaf params."""
        if self.mode == DIRECT:
            return P["texels"]
        x = P["w1"].tape.leaf(self.grid)
        h = t.relu(t.conv2d(x, P["w1"], P["b1"], pad=1))
        out = t.conv2d(h, P["w2"], P["b2"], pad=1)   # (1, C, H, W)
        out = t.reshape(out, (self.channels, self.height, self.width))
        return t.moveaxis(out, 0, 2)

    def texture(self) -> GeometryTexture:
        """Current texture as plain values."""
        tape = Tape()
        P = self.leaf_params(tape)
        return GeometryTexture(self.texture_tape(P).value.copy())

    def param_names(self):
        return sorted(self.weights)

    def param_list(self):
        return [self.weights[k] for k in self.param_names()]


# ---------------------------------------------------------------------------
# root sampling on the scalp chart

@dataclass
class RootSet:
    uv: Array         # (N, 2)
    origins: Array    # (N, 3)
    rotations: Array  # (N, 3, 3), rows tangent / bitangent / normal


def face_bases(chart: ScalpChart) -> Array:
    """Per-face TBN rotation (rows are the axes), vectorized over faces.

    Matches strands.tbn_frame on every face: the tangent follows the
    direction of increasing u, projected into the face plane.
    """
    v = chart.vertices[chart.faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    duv1 = chart.uv[chart.faces[:, 1]] - chart.uv[chart.faces[:, 0]]
    duv2 = chart.uv[chart.faces[:, 2]] - chart.uv[chart.faces[:, 0]]
    det = duv1[:, 0] * duv2[:, 1] - duv1[:, 1] * duv2[:, 0]
    du = (duv2[:, 1:2] * e1 - duv1[:, 1:2] * e2) / det[:, None]
    tang = du - (du * n).sum(axis=1, keepdims=True) * n
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    bit = np.cross(n, tang)
    return np.stack([tang, bit, n], axis=1)


def sample_roots(chart: ScalpChart, count: int, rng: np.random.Generator,
                 bases: Array | None = None) -> RootSet:
    """Uniform-over-area root draw: area-weighted face choice, then a
    uniform barycentric point on that face."""
    if bases is None:
        bases = face_bases(chart)
    v = chart.vertices[chart.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    fi = rng.choice(len(chart.faces), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.column_stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2])
    origins = np.einsum("nk,nkd->nd", bary, v[fi])
    uv = np.einsum("nk,nkd->nd", bary, chart.uv[chart.faces[fi]])
    return RootSet(uv, origins, bases[fi])


def texel_indices(uv: Array, height: int, width: int) -> Array:
    """Flat index of the texel whose center is nearest each uv."""
    j = np.clip((uv[:, 0] * width).astype(np.int64), 0, width - 1)
    i = np.clip((uv[:, 1] * height).astype(np.int64), 0, height - 1)
    return i * width + j


def place_strands_tape(local: Var, roots: RootSet) -> Var:
    """Root-relative strands (N, L, 3) -> world frame via each root's TBN."""
    n, L, _ = local.shape
    prod = t.reshape(local, (n, L, 3, 1)) * roots.rotations[:, None, :, :]
    return t.sum_(prod, axis=2) + roots.origins[:, None, :]


# ---------------------------------------------------------------------------
# visible coarse hair surface

def visible_hair_surface(f_hair: SdfGrid, f_bust: SdfGrid, cameras,
                         size: int = 256) -> TriMesh:
    """Zero surface of the hair field restricted to faces that win the
    depth test in at least one view (bust acts as occluder)."""
    hair_mesh = marching_cubes(f_hair)
    bust_mesh = marching_cubes(f_bust)
    vis = visible_faces(hair_mesh, bust_mesh, cameras, size=size)
    if not vis.any():
        raise ValueError("no visible hair surface in any view")
    return hair_mesh.submesh(vis)


# ---------------------------------------------------------------------------
# geometry losses, plain-numpy contract forms

def _world_points(strands) -> Array:
    if isinstance(strands, Hairstyle):
        strands = strands.strands
    if isinstance(strands, np.ndarray):
        pts = np.atleast_2d(np.asarray(strands, dtype=np.float64))
        if pts.ndim == 3:
            pts = pts.reshape(-1, 3)
        return pts
    pts = []
    for s in strands:
        if s.frame != WORLD:
            raise ValueError("strand-level losses expect world-frame strands")
        pts.append(s.points)
    return np.concatenate(pts) if pts else np.empty((0, 3))


def loss_vol(strands, f_hair: SdfGrid) -> float:
    """Squared field value, summed over strand points outside the volume."""
    pts = _world_points(strands)
    if len(pts) == 0:
        return 0.0
    f = f_hair.sample(pts)
    return float(np.sum(np.where(f > 0.0, f, 0.0) ** 2))


def chamfer_terms(points: Array, samples: Array):
    """Nearest strand point per surface sample -> (indices, squared dists).

    KD-tree accelerated; the distances are recomputed from the indices with
    the same expression the brute-force reference uses, so agreement on
    indices implies bit-equal values.
    """
    idx = cKDTree(points).query(samples)[1]
    sq = ((samples - points[idx]) ** 2).sum(axis=1)
    return idx, sq


def chamfer_terms_brute(points: Array, samples: Array):
    """All-pairs reference for chamfer_terms."""
    d2 = ((samples[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(samples)), idx]


def loss_chm(strands, surface: TriMesh, count: int = 2048, rng=None) -> float:
    """One-way coverage: area-weighted surface samples to their nearest
    strand point, squared distances summed."""
    pts = _world_points(strands)
    if len(pts) == 0:
        raise ValueError("coverage loss needs at least one strand point")
    if len(surface.faces) == 0:
        raise ValueError("coverage loss needs a non-empty surface")
    xs, _ = surface.sample_surface(count, np.random.default_rng(rng))
    _, sq = chamfer_terms(pts, xs)
    return float(sq.sum())


def _point_dirs(points: Array) -> Array:
    """Per-point unit direction; point l carries segment min(l, L-2)."""
    d = np.diff(points, axis=0)
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return np.concatenate([d, d[-1:]])


def _orient_terms(dirs: Array, beta: Array) -> Array:
    """Sign-invariant misalignment per point.

    Computed as the smaller of the two half squared chord distances; for
    unit inputs this equals 1 - |cos| and cannot go negative by rounding.
    """
    bn = beta / np.maximum(np.linalg.norm(beta, axis=1, keepdims=True), 1e-12)
    minus = ((dirs - bn) ** 2).sum(axis=1)
    plus = ((dirs + bn) ** 2).sum(axis=1)
    return 0.5 * np.minimum(minus, plus)


def loss_orient(strands, beta: OrientGrid, surface: TriMesh, tau: float) -> float:
    """Misalignment between strand directions and the coarse orientation
    field, over points within tau of the visible surface."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if isinstance(strands, Hairstyle):
        strands = strands.strands
    pts, dirs = [], []
    for s in strands:
        if s.frame != WORLD:
            raise ValueError("strand-level losses expect world-frame strands")
        pts.append(s.points)
        dirs.append(_point_dirs(s.points))
    if not pts:
        return 0.0
    pts = np.concatenate(pts)
    dirs = np.concatenate(dirs)
    near = mesh_distances(pts, surface)[0] < tau
    if not near.any():
        return 0.0
    terms = _orient_terms(dirs[near], beta.sample(pts[near]))
    return float(terms.sum())


def loss_geom(vol, chm, orient, cfg: FitConfig):
    """Weighted sum of the three geometry terms."""
    return vol + cfg.lambda_chm * chm + cfg.lambda_orient * orient


def loss_render(pred_mask, pred_image, mask: Array, image: Array,
                cfg: FitConfig):
    """Mean-absolute errors of silhouette and color, mask term weighted."""
    pm = pred_mask.value if isinstance(pred_mask, Var) else np.asarray(pred_mask)
    pi = pred_image.value if isinstance(pred_image, Var) else np.asarray(pred_image)
    if pm.shape != np.shape(mask) or pi.shape != np.shape(image):
        raise ValueError("render and ground truth sizes differ")
    if isinstance(pred_mask, Var) or isinstance(pred_image, Var):
        rgb = t.mean(t.absolute(pred_image - image))
        m = t.mean(t.absolute(pred_mask - mask))
    else:
        rgb = np.mean(np.abs(pi - image))
        m = np.mean(np.abs(pm - mask))
    return rgb + cfg.lambda_mask * m


def loss_fine(geom, render, prior, cfg: FitConfig):
    """Full objective: geometry plus weighted render and prior terms."""
    return geom + cfg.lambda_render * render + cfg.lambda_prior * prior


# ---------------------------------------------------------------------------
# tape twins used inside the loop

def loss_vol_tape(points: Var, f_hair: SdfGrid) -> Var:
    f = sdf_sample(f_hair.values, points, f_hair.bbox_min, f_hair.bbox_max)
    gated = t.where(f.value > 0.0, f, 0.0)
    return t.sum_(gated * gated)


def loss_chm_tape(points: Var, samples: Array) -> Var:
    idx, _ = chamfer_terms(points.value, samples)
    d = t.gather(points, idx) - samples
    return t.sum_(d * d)


def _unit_rows(v: Var) -> Var:
    return v / t.sqrt(t.sum_(v * v, axis=-1, keepdims=True) + NORM_FLOOR)


def loss_orient_tape(strand_points: Var, beta: OrientGrid, surface: TriMesh,
                     tau: float) -> Var:
    """strand_points is (N, L, 3); the near-surface point selection is
    frozen at the current values."""
    n, L, _ = strand_points.shape
    flat_v = strand_points.value.reshape(-1, 3)
    near = np.where(mesh_distances(flat_v, surface)[0] < tau)[0]
    if len(near) == 0:
        return strand_points.tape.leaf(np.array(0.0))
    seg = strand_points[:, 1:] - strand_points[:, :-1]
    b = _unit_rows(seg)
    b = t.concatenate([b, b[:, L - 2:L - 1]], axis=1)
    b_sel = t.gather(t.reshape(b, (n * L, 3)), near)
    p_sel = t.gather(t.reshape(strand_points, (n * L, 3)), near)
    field = _unit_rows(grid_sample(beta.values, p_sel,
                                   beta.bbox_min, beta.bbox_max))
    dm = b_sel - field
    dp = b_sel + field
    per = t.minimum(t.sum_(dm * dm, axis=-1), t.sum_(dp * dp, axis=-1))
    return t.sum_(per) * 0.5


# ---------------------------------------------------------------------------
# optimizer step

@dataclass
class AdamState:
    opt: Adam
    iteration: int = 0


def adam_state(params: list, cfg: FitConfig) -> AdamState:
    return AdamState(Adam(params, lr=cfg.learning_rate))


def adam_multistep(params: list, grads: list, state: AdamState,
                   cfg: FitConfig) -> list:
    """One Adam step at the milestone-decayed rate; params mutate in place."""
    state.opt.lr = multistep_lr(cfg.learning_rate, cfg.gamma_lr,
                                cfg.milestones, state.iteration)
    state.opt.step(grads)
    state.iteration += 1
    return params


# ---------------------------------------------------------------------------
# the fitting loop

@dataclass
class StrandPriors:
    """Evaluators the loop consumes: a codec always, a denoiser when the
    prior term is enabled."""
    codec: object
    denoiser: object = None
    edm: object = None


@dataclass
class FitResult:
    hairstyle: Hairstyle
    texture: GeometryTexture
    history: list
    surface: TriMesh | None = None

    def save(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        write_strd(os.path.join(out_dir, "strands.strd"),
                   [s.points for s in self.hairstyle.strands],
                   self.hairstyle.roots)
        self.texture.save(os.path.join(out_dir, "texture.gtex"))
        write_fit_csv(os.path.join(out_dir, "losses.csv"), self.history)


FIT_CSV_COLUMNS = ["iteration", "L_vol", "L_chm", "L_orient", "L_rgb",
                   "L_mask", "L_prior", "L_fine", "lr"]


def write_fit_csv(path: str, history: list):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(FIT_CSV_COLUMNS)
        for row in history:
            wr.writerow([row[c] for c in FIT_CSV_COLUMNS])


def _require_fields(fields):
    for name in ("hair", "bust", "direction"):
        if getattr(fields, name, None) is None:
            raise ValueError(f"missing coarse fields: {name}")


@dataclass
class CoarseFields:
    """Minimal bundle of Stage I outputs the strand fit needs."""
    hair: SdfGrid
    bust: SdfGrid
    direction: OrientGrid


def _scene_albedo(scene) -> Array:
    """Mean hair color across views; neutral gray when no hair is seen."""
    acc, cnt = np.zeros(3), 0.0
    for img, m in zip(scene.images, scene.hair_masks):
        sel = m > 0.5
        acc += img[sel].sum(axis=0)
        cnt += sel.sum()
    return acc / cnt if cnt else np.full(3, 0.5)


def _hairless_views(scene) -> list:
    """Per view: the image with hair pixels filled by the mean non-hair,
    non-bust color.  Used as the compositing background for renders."""
    out = []
    for img, hm, bm in zip(scene.images, scene.hair_masks, scene.bust_masks):
        free = (hm < 0.5) & (bm < 0.5)
        fill = img[free].mean(axis=0) if free.any() else img.mean(axis=(0, 1))
        bg = img.copy()
        bg[hm > 0.5] = fill
        out.append(bg)
    return out


def fit_strands(scene, fields, priors: StrandPriors,
                cfg: FitConfig | None = None,
                texture: TextureParam | None = None,
                log_path: str | None = None) -> FitResult:
    """Optimize the geometry texture against coarse fields and views.

    Every iteration draws a fresh seeded batch of roots, decodes them
    through the codec, and scores the strands; under a fixed config and
    seed the loop is deterministic.
    """
    cfg = cfg or FitConfig()
    _require_fields(fields)
    if cfg.lambda_prior > 0 and (priors.denoiser is None or priors.edm is None):
        raise ValueError("prior term enabled but no denoiser/noise schedule loaded")
    chart = scene.scalp
    bases = face_bases(chart)
    codec = priors.codec
    H = W = cfg.texture_size
    texp = texture or TextureParam(H, W, codec.code_dim)
    if (texp.height, texp.width) != (H, W):
        H, W = texp.height, texp.width
    names = texp.param_names()
    params = texp.param_list()
    state = adam_state(params, cfg)

    need_surface = cfg.lambda_chm > 0 or cfg.lambda_orient > 0
    surface = None
    if need_surface:
        surface = visible_hair_surface(fields.hair, fields.bust,
                                       scene.cameras, cfg.visibility_raster)
    tau = cfg.tau if cfg.tau is not None else 5.0 * float(np.max(fields.hair.cell))

    render_on = cfg.lambda_render > 0
    if render_on:
        bust_mesh = marching_cubes(fields.bust)
        depths = [raster_depth_ids(bust_mesh.vertices, bust_mesh.faces, cam)[0]
                  for cam in scene.cameras]
        backgrounds = _hairless_views(scene)
        albedo = _scene_albedo(scene)
    n = cfg.strands_per_iter
    L = codec.length
    segments, owner = strand_segments(n, L)
    img_w, img_h = scene.image_size

    history = []
    for it in range(cfg.iterations):
        rng = np.random.default_rng((cfg.seed, it))
        tape = Tape()
        P = texp.leaf_params(tape)
        tex = texp.texture_tape(P)
        roots = sample_roots(chart, n, rng, bases)
        codes = t.gather(t.reshape(tex, (H * W, codec.code_dim)),
                         texel_indices(roots.uv, H, W))
        local = codec.decode_batch_tape(codes)
        world = place_strands_tape(local, roots)
        flat = t.reshape(world, (n * L, 3))

        vol = loss_vol_tape(flat, fields.hair)
        total = vol
        row = {c: 0.0 for c in FIT_CSV_COLUMNS}
        row["iteration"] = it
        row["L_vol"] = float(vol.value)
        if cfg.lambda_chm > 0:
            xs = surface.sample_surface(cfg.surface_samples, rng)[0]
            chm = loss_chm_tape(flat, xs)
            total = total + cfg.lambda_chm * chm
            row["L_chm"] = float(chm.value)
        if cfg.lambda_orient > 0:
            orient = loss_orient_tape(world, fields.direction, surface, tau)
            total = total + cfg.lambda_orient * orient
            row["L_orient"] = float(orient.value)
        if render_on:
            ci = int(rng.integers(len(scene.cameras)))
            out = soft_render(flat, np.tile(albedo, (n, 1)), segments, owner,
                              scene.cameras[ci], cfg.strand_width,
                              (img_w, img_h), cfg.raster,
                              bust_depth=depths[ci],
                              background=backgrounds[ci].reshape(-1, 3))
            rgb = t.mean(t.absolute(out["image"] - scene.images[ci]))
            msk = t.mean(t.absolute(out["silhouette"] - scene.hair_masks[ci]))
            total = total + cfg.lambda_render * (rgb + cfg.lambda_mask * msk)
            row["L_rgb"] = float(rgb.value)
            row["L_mask"] = float(msk.value)
        if cfg.lambda_prior > 0:
            pg = prior_gradient(tex.value, priors.edm, priors.denoiser,
                                mode=FULL_BACKPROP, rng=rng,
                                batch=cfg.prior_draws)
            # exact gradient coupling: the inner product against the frozen
            # prior gradient back-propagates lambda * pg.grad into the texture
            total = total + cfg.lambda_prior * t.sum_(tex * pg.grad)
            row["L_prior"] = pg.loss
        row["L_fine"] = (row["L_vol"] + cfg.lambda_chm * row["L_chm"]
                         + cfg.lambda_orient * row["L_orient"]
                         + cfg.lambda_render * (row["L_rgb"]
                                                + cfg.lambda_mask * row["L_mask"])
                         + cfg.lambda_prior * row["L_prior"])
        row["lr"] = multistep_lr(cfg.learning_rate, cfg.gamma_lr,
                                 cfg.milestones, state.iteration)
        grads = tape.backward(total)
        adam_multistep(params, [grads[P[k].index] for k in names], state, cfg)
        history.append(row)

    final = texp.texture()
    rng = np.random.default_rng((cfg.seed, cfg.iterations))
    roots = sample_roots(chart, n, rng, bases)
    codes = final.data.reshape(H * W, codec.code_dim)[
        texel_indices(roots.uv, H, W)]
    local = codec.decode_batch(codes)
    world = np.einsum("nlk,nki->nli", local, roots.rotations) + \
        roots.origins[:, None, :]
    style = Hairstyle([Strand(p) for p in world], roots=roots.uv)
    if log_path is not None:
        write_fit_csv(log_path, history)
    return FitResult(style, final, history, surface)
