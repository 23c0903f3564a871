"""Coarse volumetric stage: dual signed-distance fields fit to posed views.

Two trilinear SDF grids (hair, bust) share one differentiable renderer.
Per-sample opacity comes from the sigmoid-of-distance ratio form, the two
media blend by adding opacities (clamped at one), and per-medium mattes
are rendered by splitting each blended sample proportionally.  Appearance
is a low-order per-node radiance (constant + view + normal lobes), plus a
learnable constant background and a learnable opacity sharpness.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import adtape as t
from .adtape import Var
from .fields import (OrientGrid, SdfGrid, TriMesh, grid_sample,
                     grid_spatial_gradient, ray_box_intersection, sdf_sample)
from .optim import Adam
from .orient2d import INVALID_VARIANCE, loss_dir

Array = np.ndarray

COLOR_CHANNELS = 21  # per node: 3 constant + 9 view-lobe + 9 normal-lobe


# ---------------------------------------------------------------------------
# opacity model

def alpha_from_sdf(sdf, s, ts=None):
    """Per-interval opacities from consecutive SDF samples along each ray.

    sdf is (..., N); the result is (..., N-1).  Opacity is the clamped
    relative drop of sigmoid(s * f) between neighbouring samples; the
    sample spacing cancels in the ratio, so `ts` is accepted for interface
    symmetry but not used.
    """
    if isinstance(sdf, Var) or isinstance(s, Var):
        phi = t.sigmoid(sdf * s)
        return t.relu((phi[..., :-1] - phi[..., 1:]) / phi[..., :-1])
    phi = 1.0 / (1.0 + np.exp(-np.clip(s * sdf, -500, 500)))
    return np.maximum((phi[..., :-1] - phi[..., 1:]) / phi[..., :-1], 0.0)


def blend_alpha(alpha_hair, alpha_bust):
    """Two-media opacity: sum clamped at one."""
    if isinstance(alpha_hair, Var) or isinstance(alpha_bust, Var):
        return t.minimum(alpha_hair + alpha_bust, 1.0)
    return np.minimum(alpha_hair + alpha_bust, 1.0)


def blend_weight(alpha_hair, alpha_bust):
    """Bust share used to mix the two surface normals."""
    return alpha_bust / (alpha_bust + alpha_hair + 1e-5)


def point_opacity(f, s):
    """Occupancy of a single point, used for volumetric penalties."""
    return t.sigmoid(-(f * s)) if isinstance(f, Var) or isinstance(s, Var) \
        else 1.0 / (1.0 + np.exp(np.clip(s * f, -500, 500)))


def transmittance(alpha):
    """Exclusive product of survival probabilities along the last axis."""
    if isinstance(alpha, Var):
        return t.cumprod_exclusive(1.0 - alpha + 1e-7, axis=-1)
    surv = 1.0 - alpha + 1e-7
    out = np.cumprod(surv, axis=-1)
    out = np.roll(out, 1, axis=-1)
    out[..., 0] = 1.0
    return out


def final_transmittance(alpha):
    T = transmittance(alpha)
    return T[..., -1] * (1.0 - alpha[..., -1] + 1e-7)


def composite(alpha, colors, background):
    """Front-to-back colour with the leftover throughput on the background.

    alpha (R, N), colors (R, N, 3), background (3,) -> (R, 3).
    """
    T = transmittance(alpha)
    w = T * alpha
    if isinstance(w, Var):
        wr = t.reshape(w, w.shape + (1,))
        img = t.sum_(wr * colors, axis=1)
        tf = t.reshape(final_transmittance(alpha), (-1, 1))
        return img + tf * background
    img = (w[..., None] * colors).sum(axis=1)
    return img + final_transmittance(alpha)[:, None] * background


def render_masks(alpha_hair, alpha_bust):
    """Per-medium mattes: each blended sample split in proportion.

    Where both opacities are exactly zero the split is gated to zero with a
    finite denominator, so the backward pass stays free of 0/0.
    """
    blend = blend_alpha(alpha_hair, alpha_bust)
    T = transmittance(blend)
    w = T * blend
    if isinstance(w, Var):
        denom = alpha_hair + alpha_bust
        safe = denom + np.where(denom.value == 0.0, 1.0, 0.0)
        oh = t.sum_(w * (alpha_hair / safe), axis=-1)
        ob = t.sum_(w * (alpha_bust / safe), axis=-1)
        return oh, ob
    denom = alpha_hair + alpha_bust
    safe = np.where(denom == 0.0, 1.0, denom)
    # ratio first: with one medium absent this is exactly 1, so the matte
    # reduces bit-for-bit to the single-medium sum
    oh = (w * (alpha_hair / safe)).sum(axis=-1)
    ob = (w * (alpha_bust / safe)).sum(axis=-1)
    return oh, ob


# ---------------------------------------------------------------------------
# appearance

def eval_color(coeffs, view: Array, normal):
    """Radiance from per-point coefficients, clamped to [0, 1].

    coeffs (P, 21): per channel c, coeffs[c] is the constant part,
    coeffs[3+3c:6+3c] dot the view direction and coeffs[12+3c:15+3c] dot
    the surface normal.
    """
    base = coeffs[:, 0:3]
    vc = t.reshape(coeffs[:, 3:12], (-1, 3, 3))
    nc = t.reshape(coeffs[:, 12:21], (-1, 3, 3))
    vterm = t.sum_(vc * view[:, None, :], axis=2)
    if isinstance(normal, Var):
        nterm = t.sum_(nc * t.reshape(normal, (-1, 1, 3)), axis=2)
    else:
        nterm = t.sum_(nc * normal[:, None, :], axis=2)
    return t.clamp(base + vterm + nterm, 0.0, 1.0)


def _normalize_rows(v: Var) -> Var:
    # soft normalization: the floor keeps the op near-linear where the
    # blended SDF gradient degenerates (interior critical points), so
    # gradients stay bounded there; a unit-length input shrinks by only
    # 0.5%, which the radiance coefficients absorb
    n2 = t.sum_(v * v, axis=-1, keepdims=True)
    return v / t.sqrt(n2 + 1e-2)


# ---------------------------------------------------------------------------
# ray sampling (numpy side)

def stratified_ts(t_near: Array, t_far: Array, count: int,
                  rng: np.random.Generator) -> Array:
    """One jittered sample per equal slice of [t_near, t_far]."""
    R = len(t_near)
    u = rng.random((R, count))
    edges = (np.arange(count) + u) / count
    return t_near[:, None] + (t_far - t_near)[:, None] * edges


def importance_ts(ts: Array, weights: Array, count: int,
                  rng: np.random.Generator) -> Array:
    """Inverse-CDF samples over the intervals of `ts` weighted per interval.

    ts (R, N) sorted, weights (R, N-1) non-negative.
    """
    w = weights + 1e-5
    cdf = np.cumsum(w, axis=-1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((len(w), 1)), cdf], axis=-1)
    u = rng.random((len(w), count))
    idx = np.empty(u.shape, dtype=np.int64)
    for r in range(len(w)):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, w.shape[1] - 1)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    frac = (u - lo) / np.maximum(hi - lo, 1e-12)
    t0 = np.take_along_axis(ts, idx, axis=-1)
    t1 = np.take_along_axis(ts, idx + 1, axis=-1)
    return t0 + frac * (t1 - t0)


# ---------------------------------------------------------------------------
# losses

def loss_color(pred, target: Array):
    if pred.shape != target.shape:
        raise ValueError(f"colour batch shape {pred.shape} vs target {target.shape}")
    return t.mean(t.absolute(pred - target))


def binary_cross_entropy(pred, target: Array):
    if pred.shape != target.shape:
        raise ValueError(f"mask batch shape {pred.shape} vs target {target.shape}")
    p = t.clamp(pred, 1e-6, 1.0 - 1e-6)
    return -t.mean(target * t.log(p) + (1.0 - target) * t.log1p(-p))


def loss_mask(pred_hair, pred_bust, target_hair: Array, target_bust: Array):
    return binary_cross_entropy(pred_hair, target_hair) \
        + binary_cross_entropy(pred_bust, target_bust)


def eikonal_loss(grid_var: Var, pts: Array, bbox_min, bbox_max):
    g = grid_spatial_gradient(grid_var, pts, bbox_min, bbox_max)
    n = t.sqrt(t.sum_(g * g, axis=-1) + 1e-24)
    return t.mean((n - 1.0) ** 2)


def loss_reg(hair_var: Var, bust_var: Var, pts: Array, bbox_min, bbox_max):
    return eikonal_loss(hair_var, pts, bbox_min, bbox_max) \
        + eikonal_loss(bust_var, pts, bbox_min, bbox_max)


@dataclass
class HeadSets:
    """Point sets for the head-shape penalty.

    surface_points/normals lie on the scalp; outside_points are away from
    the head; inside_points are within it (where hair opacity is banned).
    """
    surface_points: Array
    surface_normals: Array
    outside_points: Array
    inside_points: Array


def loss_head(hair_var: Var, bust_var: Var, s, sets: HeadSets,
              bbox_min, bbox_max, gamma: float = 100.0):
    """Anchor the bust to the scalp and keep hair out of the head.

    Four averaged terms: |f_bust| on the scalp, 0.1 x normal alignment
    there, 0.1 x a thin-shell repulsion exp(-gamma |f_bust|) outside, and
    the pointwise hair opacity inside the head.
    """
    total = 0.0
    if len(sets.surface_points):
        fb = sdf_sample(bust_var, sets.surface_points, bbox_min, bbox_max)
        total = total + t.mean(t.absolute(fb))
        g = grid_spatial_gradient(bust_var, sets.surface_points, bbox_min, bbox_max)
        total = total + 0.1 * t.mean(1.0 - t.sum_(g * sets.surface_normals, axis=-1))
    if len(sets.outside_points):
        fo = sdf_sample(bust_var, sets.outside_points, bbox_min, bbox_max)
        total = total + 0.1 * t.mean(t.exp(t.absolute(fo) * (-gamma)))
    if len(sets.inside_points):
        fi = sdf_sample(hair_var, sets.inside_points, bbox_min, bbox_max)
        total = total + t.mean(t.absolute(point_opacity(fi, s)))
    return total


@dataclass
class CoarseWeights:
    color: float = 1.0
    mask: float = 0.1
    reg: float = 0.1
    head: float = 0.1
    direction: float = 0.1


# ---------------------------------------------------------------------------
# parameters

def fit_sphere(pts: Array):
    """Algebraic least-squares sphere through a point cloud -> (center, radius)."""
    pts = np.asarray(pts, dtype=np.float64)
    A = np.concatenate([2.0 * pts, np.ones((len(pts), 1))], axis=1)
    b = (pts ** 2).sum(axis=1)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    center = x[:3]
    r2 = x[3] + center @ center
    return center, float(np.sqrt(max(r2, 0.0)))


@dataclass
class CoarseParams:
    bbox_min: Array
    bbox_max: Array
    hair: Array       # (res, res, res)
    bust: Array
    direction: Array  # (res, res, res, 3)
    colors: Array     # (res, res, res, 21)
    log_s: Array      # scalar
    background: Array  # (3,)

    def as_list(self):
        return [self.hair, self.bust, self.direction, self.colors,
                self.log_s, self.background]

    def nodes(self) -> Array:
        res = self.hair.shape[0]
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], res) for a in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def init_params(scene, resolution: int = 48) -> CoarseParams:
    """Spheres around the best-fit scalp sphere; hair starts generously large."""
    center, radius = fit_sphere(scene.scalp.vertices)
    half = 1.8 * radius
    bmin = center - half
    bmax = center + half
    res = resolution
    axes = [np.linspace(bmin[a], bmax[a], res) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    d = np.linalg.norm(nodes - center, axis=1)
    bust = (d - radius).reshape(res, res, res)
    hair = (d - 1.25 * radius).reshape(res, res, res)
    beta = np.zeros((res, res, res, 3))
    beta[..., 2] = -1.0
    colors = np.zeros((res, res, res, COLOR_CHANNELS))
    colors[..., 0:3] = 0.5
    return CoarseParams(bmin, bmax, hair.copy(), bust.copy(), beta, colors,
                        np.array(np.log(20.0)), np.full(3, 0.5))


# ---------------------------------------------------------------------------
# rendering a ray batch on the tape

def render_batch(leafs: dict, bbox_min, bbox_max, origins: Array, dirs: Array,
                 ts: Array) -> dict:
    """Differentiable colour, mattes and opacities for rays sampled at ts."""
    R, N = ts.shape
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    s = t.exp(leafs["log_s"])
    fh = t.reshape(sdf_sample(leafs["hair"], flat, bbox_min, bbox_max), (R, N))
    fb = t.reshape(sdf_sample(leafs["bust"], flat, bbox_min, bbox_max), (R, N))
    ah = alpha_from_sdf(fh, s, ts)
    ab = alpha_from_sdf(fb, s, ts)
    blend = blend_alpha(ah, ab)

    left = np.ascontiguousarray(pts[:, :-1, :]).reshape(-1, 3)
    gh = grid_spatial_gradient(leafs["hair"], left, bbox_min, bbox_max)
    gb = grid_spatial_gradient(leafs["bust"], left, bbox_min, bbox_max)
    w = t.reshape(blend_weight(ah, ab), (-1, 1))
    normal = _normalize_rows(gb * w + gh * (1.0 - w))
    view = np.repeat(dirs, N - 1, axis=0)
    coeffs = grid_sample(leafs["colors"], left, bbox_min, bbox_max)
    rgb = t.reshape(eval_color(coeffs, view, normal), (R, N - 1, 3))

    color = composite(blend, rgb, leafs["background"])
    mh, mb = render_masks(ah, ab)
    return {"color": color, "hair_matte": mh, "bust_matte": mb,
            "alpha_hair": ah, "alpha_bust": ab, "alpha": blend,
            "sdf_hair": fh, "sdf_bust": fb}


# ---------------------------------------------------------------------------
# fitting

@dataclass
class CoarseConfig:
    """Short-fit defaults; a high-quality run wants lr around 5e-4 and a few
    hundred thousand iterations, which is far beyond what tests exercise."""
    iterations: int = 1500
    resolution: int = 48
    rays_per_batch: int = 512
    samples_per_ray: int = 32
    importance_samples: int = 32
    lr: float = 5e-3
    seed: int = 0
    dir_pixels: int = 128
    reg_points: int = 1024
    head_points: int = 256
    gamma: float = 100.0
    weights: CoarseWeights = field(default_factory=CoarseWeights)
    log_every: int = 25


@dataclass
class CoarseResult:
    hair: SdfGrid
    bust: SdfGrid
    direction: OrientGrid
    colors: Array
    background: Array
    sharpness: float
    history: list

    def save(self, out_dir: str):
        from .formats import write_orng, write_sdfg
        os.makedirs(out_dir, exist_ok=True)
        write_sdfg(os.path.join(out_dir, "hair.sdfg"),
                   self.hair.bbox_min, self.hair.bbox_max, self.hair.values)
        write_sdfg(os.path.join(out_dir, "bust.sdfg"),
                   self.bust.bbox_min, self.bust.bbox_max, self.bust.values)
        write_orng(os.path.join(out_dir, "direction.orng"),
                   self.direction.bbox_min, self.direction.bbox_max,
                   self.direction.values)


def write_history_csv(path: str, history: list):
    cols = ["iteration", "color", "mask", "reg", "head", "direction", "total"]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for row in history:
            wr.writerow([row[c] for c in cols])


def _head_sets(scalp_mesh: TriMesh, center, radius, bbox_min, bbox_max,
               count: int, rng: np.random.Generator) -> HeadSets:
    surf, fi = scalp_mesh.sample_surface(count, rng)
    normals = scalp_mesh.face_normals()[fi]
    vol = rng.uniform(bbox_min, bbox_max, size=(2 * count, 3))
    sd = np.linalg.norm(vol - center, axis=1) - radius
    # keep a margin so the sampled shell does not straddle the surface
    return HeadSets(surf, normals, vol[sd > 0.02 * radius],
                    vol[sd < -0.05 * radius])


def fit_coarse(scene, config: CoarseConfig | None = None,
               log_path: str | None = None) -> CoarseResult:
    """Fit both SDFs, the 3D direction field, colours and background.

    The scene must carry at least one calibrated view with colour image and
    both mattes; orientation maps are required unless the direction weight
    is zero.  Each iteration renders one random ray batch (stratified plus
    one importance pass) on a fresh tape and takes an Adam step.
    """
    config = config or CoarseConfig()
    wts = config.weights
    if len(scene.cameras) == 0:
        raise ValueError("scene has no views")
    if wts.direction > 0:
        if scene.orient_maps is None or any(o is None for o in scene.orient_maps):
            raise ValueError("direction loss needs an orientation map per view")

    params = init_params(scene, config.resolution)
    bmin, bmax = params.bbox_min, params.bbox_max
    center, radius = fit_sphere(scene.scalp.vertices)
    scalp_mesh = TriMesh(scene.scalp.vertices, scene.scalp.faces)
    opt = Adam(params.as_list(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    # per view: ray grids and flattened targets
    W, H = scene.image_size
    view_dirs, view_origins = [], []
    for cam in scene.cameras:
        uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
        o, d = cam.pixel_rays(uu.ravel(), vv.ravel())
        view_origins.append(o[0])
        view_dirs.append(d)
    images = [im.reshape(-1, 3) for im in scene.images]
    hair_m = [m.ravel() for m in scene.hair_masks]
    bust_m = [m.ravel() for m in scene.bust_masks]

    # orientation-supervision pixel pools: on-hair with a confident estimate
    dir_pool = []
    if wts.direction > 0:
        for i, (angle, var) in enumerate(scene.orient_maps):
            ok = (scene.hair_masks[i] > 0.5) & (var < INVALID_VARIANCE - 1e-9)
            vy, vx = np.nonzero(ok)
            dir_pool.append((vx, vy, angle, var, scene.hair_masks[i]))

    history = []
    for it in range(config.iterations):
        vi = int(rng.integers(len(scene.cameras)))
        pix = rng.integers(0, W * H, size=config.rays_per_batch)
        o = np.broadcast_to(view_origins[vi], (len(pix), 3))
        d = view_dirs[vi][pix]
        tn, tf, hit = ray_box_intersection(o, d, bmin, bmax)
        tn = np.where(hit, tn, 1.0)
        tf = np.where(hit, tf, 1.0 + 1e-3)
        ts = np.sort(stratified_ts(tn, tf, config.samples_per_ray, rng), axis=-1)
        if config.importance_samples > 0:
            hair_np = SdfGrid(bmin, bmax, params.hair)
            bust_np = SdfGrid(bmin, bmax, params.bust)
            pts = o[:, None, :] + ts[:, :, None] * d[:, None, :]
            flat = pts.reshape(-1, 3)
            s_np = float(np.exp(params.log_s))
            fh = hair_np.sample(flat).reshape(ts.shape)
            fb = bust_np.sample(flat).reshape(ts.shape)
            a = blend_alpha(alpha_from_sdf(fh, s_np), alpha_from_sdf(fb, s_np))
            w = transmittance(a) * a
            extra = importance_ts(ts, w, config.importance_samples, rng)
            ts = np.sort(np.concatenate([ts, extra], axis=-1), axis=-1)

        tp = t.Tape()
        leafs = {
            "hair": tp.leaf(params.hair), "bust": tp.leaf(params.bust),
            "direction": tp.leaf(params.direction),
            "colors": tp.leaf(params.colors),
            "log_s": tp.leaf(params.log_s),
            "background": tp.leaf(params.background),
        }
        out = render_batch(leafs, bmin, bmax, o, d, ts)
        terms = {}
        total = loss_color(out["color"], images[vi][pix])
        terms["color"] = float(total.value)
        if wts.mask > 0:
            lm = loss_mask(out["hair_matte"], out["bust_matte"],
                           hair_m[vi][pix], bust_m[vi][pix])
            terms["mask"] = float(lm.value)
            total = total + wts.mask * lm
        else:
            terms["mask"] = 0.0
        if wts.reg > 0:
            rp = rng.uniform(bmin, bmax, size=(config.reg_points, 3))
            lr_ = loss_reg(leafs["hair"], leafs["bust"], rp, bmin, bmax)
            terms["reg"] = float(lr_.value)
            total = total + wts.reg * lr_
        else:
            terms["reg"] = 0.0
        if wts.head > 0:
            sets = _head_sets(scalp_mesh, center, radius, bmin, bmax,
                              config.head_points, rng)
            lh = loss_head(leafs["hair"], leafs["bust"], t.exp(leafs["log_s"]),
                           sets, bmin, bmax, config.gamma)
            terms["head"] = float(lh.value)
            total = total + wts.head * lh
        else:
            terms["head"] = 0.0
        if wts.direction > 0 and len(dir_pool[vi][0]) > 0:
            vx, vy, angle, var, hm = dir_pool[vi]
            sel = rng.integers(0, len(vx), size=min(config.dir_pixels, len(vx)))
            px = np.column_stack([vx[sel] + 0.5, vy[sel] + 0.5])
            ld = loss_dir(leafs["hair"], leafs["direction"], scene.cameras[vi],
                          px, angle[vy[sel], vx[sel]], var[vy[sel], vx[sel]],
                          hm[vy[sel], vx[sel]], bmin, bmax)
            terms["direction"] = float(ld.value)
            total = total + wts.direction * ld
        else:
            terms["direction"] = 0.0
        terms["total"] = float(total.value)

        grads = tp.backward(total)
        opt.step([grads[leafs[k].index] for k in
                  ("hair", "bust", "direction", "colors", "log_s", "background")])
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iteration": it, **terms})

    if log_path:
        write_history_csv(log_path, history)
    return CoarseResult(
        SdfGrid(bmin, bmax, params.hair), SdfGrid(bmin, bmax, params.bust),
        OrientGrid(bmin, bmax, params.direction), params.colors,
        params.background, float(np.exp(params.log_s)), history)
