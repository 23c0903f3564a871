"""Differentiable strand rasterization with soft coverage and soft depth.

Each strand segment projects to a width-w ribbon around its screen-space
centerline (a quad with rounded caps: coverage is measured by distance to
the projected segment).  Per-pixel fragments get a coverage probability
sigmoid(-d|d|/sigma) of the signed distance d to the ribbon edge in NDC;
the silhouette is one minus the product of non-coverage, and colours blend
with softmax weights favouring near fragments.  Everything downstream of
the constant fragment selection is on the tape, so strand positions and
colours receive gradients automatically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adtape as t
from .adtape import Var

Array = np.ndarray


@dataclass
class SoftRasterSettings:
    """Production values; unit tests use far larger sigma/gamma so that a
    handful of pixels carries usable gradient signal."""
    sigma: float = 1e-5
    gamma: float = 1e-5
    blur: float = 1e-4
    max_fragments: int = 16
    tile: int = 16
    occlusion_eps: float = 1e-6


def strand_segments(count: int, length: int):
    """Flat-index segment table for `count` strands of `length` points.

    Returns (segments (Q, 2) int, strand id (Q,) int).
    """
    base = np.arange(count)[:, None] * length + np.arange(length - 1)
    seg = np.stack([base, base + 1], axis=-1).reshape(-1, 2)
    owner = np.repeat(np.arange(count), length - 1)
    return seg, owner


@dataclass
class FragmentSet:
    """Constant fragment table: which quad covers which pixel."""
    pixel: Array   # (F,) flat pixel index
    quad: Array    # (F,) segment index
    count: int


def _pixel_centers_ndc(H: int, W: int):
    u = (np.arange(W) + 0.5) * (2.0 / W) - 1.0
    v = (np.arange(H) + 0.5) * (2.0 / H) - 1.0
    gx, gy = np.meshgrid(u, v)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _point_segment_dist(px: Array, a: Array, b: Array):
    e = b - a
    pa = px - a
    denom = (e * e).sum(axis=-1)
    tt = np.clip((pa * e).sum(axis=-1) / np.where(denom > 0, denom, 1.0), 0, 1)
    closest = a + tt[..., None] * e
    return np.linalg.norm(px - closest, axis=-1)


def collect_fragments(ndc: Array, z: Array, segments: Array, width_ndc: Array,
                      H: int, W: int, settings: SoftRasterSettings,
                      bust_depth: Array | None = None) -> FragmentSet:
    """Tile-based candidate search over constant projected geometry.

    Keeps, per pixel, the `max_fragments` nearest surviving quads by mean
    camera depth.  Quads behind the opaque bust depth at a pixel are
    dropped here, before the tape ever sees them, so they get zero
    gradient by construction.
    """
    a = ndc[segments[:, 0]]
    b = ndc[segments[:, 1]]
    za = z[segments[:, 0]]
    zb = z[segments[:, 1]]
    zbar = 0.5 * (za + zb)
    ok = (za > 1e-6) & (zb > 1e-6)
    reach = width_ndc + np.sqrt(settings.blur)

    # pixel-space bounding boxes, then tiles
    to_px = np.array([0.5 * W, 0.5 * H])
    apx = (a + 1.0) * to_px
    bpx = (b + 1.0) * to_px
    rpx = reach[:, None] * to_px
    lo = np.floor(np.minimum(apx, bpx) - rpx - 0.5).astype(np.int64)
    hi = np.ceil(np.maximum(apx, bpx) + rpx + 0.5).astype(np.int64)
    lo = np.clip(lo, 0, [W - 1, H - 1])
    hi = np.clip(hi, 0, [W - 1, H - 1])

    ts = settings.tile
    ntx = (W + ts - 1) // ts
    nty = (H + ts - 1) // ts
    tiles = [[] for _ in range(ntx * nty)]
    for q in np.nonzero(ok)[0]:
        tx0, ty0 = lo[q] // ts
        tx1, ty1 = hi[q] // ts
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tiles[ty * ntx + tx].append(q)

    centers = _pixel_centers_ndc(H, W)
    pix_out, quad_out, zeta_out = [], [], []
    for ty in range(nty):
        for tx in range(ntx):
            quads = tiles[ty * ntx + tx]
            if not quads:
                continue
            quads = np.array(quads)
            xs = np.arange(tx * ts, min((tx + 1) * ts, W))
            ys = np.arange(ty * ts, min((ty + 1) * ts, H))
            gx, gy = np.meshgrid(xs, ys)
            pidx = (gy * W + gx).ravel()
            pc = centers[pidx]  # (P, 2)
            d = _point_segment_dist(pc[:, None, :], a[quads][None],
                                    b[quads][None])  # (P, Q)
            cover = d <= (width_ndc[quads] + np.sqrt(settings.blur))[None]
            if bust_depth is not None:
                bd = bust_depth.ravel()[pidx]
                cover &= zbar[quads][None] <= \
                    bd[:, None] + settings.occlusion_eps
            pi, qi = np.nonzero(cover)
            pix_out.append(pidx[pi])
            quad_out.append(quads[qi])
            zeta_out.append(-zbar[quads[qi]])
    if not pix_out:
        return FragmentSet(np.zeros(0, np.int64), np.zeros(0, np.int64), 0)
    pix = np.concatenate(pix_out)
    quad = np.concatenate(quad_out)
    zeta = np.concatenate(zeta_out)
    if len(pix) == 0:
        return FragmentSet(pix, quad, 0)

    # per pixel keep the front-most K, deterministically
    order = np.lexsort((quad, -zeta, pix))
    pix, quad = pix[order], quad[order]
    n = len(pix)
    idx = np.arange(n)
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    starts[1:] = pix[1:] != pix[:-1]
    group_start = np.maximum.accumulate(np.where(starts, idx, 0))
    keep = (idx - group_start) < settings.max_fragments
    return FragmentSet(pix[keep], quad[keep], int(keep.sum()))


def project_points(points: Var, cam, W: int, H: int):
    """Camera projection on the tape -> (ndc (N,2), camera depth (N,))."""
    pc = t.matmul(points, cam.rotation.T) + cam.translation
    z = t.maximum(pc[:, 2], 1e-6)
    xn = (pc[:, 0] / z) * (2.0 * cam.fx / W) + (2.0 * cam.cx / W - 1.0)
    yn = (pc[:, 1] / z) * (2.0 * cam.fy / H) + (2.0 * cam.cy / H - 1.0)
    return t.stack([xn, yn], axis=1), z


def soft_render(points, colors, segments: Array, strand_of: Array, cam,
                width: float, image_size, settings: SoftRasterSettings,
                bust_depth: Array | None = None, background=None):
    """Render strands -> {"image": (H,W,3), "silhouette": (H,W), "fragments"}.

    points: Var or (N, 3) array of flattened strand points (world);
    colors: (M, 3) per strand, Var or constant; width is the world-space
    strand half-thickness... full thickness; the per-segment NDC width is
    width * 2 fx / (W z).
    """
    W, H = image_size
    tape = points.tape if isinstance(points, Var) else t.Tape()
    if not isinstance(points, Var):
        points = tape.leaf(points)
    ndc, z = project_points(points, cam, W, H)

    zv = z.value
    wconst = width * 2.0 * cam.fx / W
    seg_z = 0.5 * (zv[segments[:, 0]] + zv[segments[:, 1]])
    frags = collect_fragments(ndc.value, zv, segments,
                              wconst / np.maximum(seg_z, 1e-6), H, W,
                              settings, bust_depth)
    bg = background if background is not None else np.zeros(3)
    npix = H * W
    if frags.count == 0:
        zero = tape.leaf(np.zeros((npix, 3)))
        m = tape.leaf(np.zeros(npix))
        image = zero + (1.0 - t.reshape(m, (npix, 1))) * bg
        return {"image": t.reshape(image, (H, W, 3)),
                "silhouette": t.reshape(m, (H, W)), "fragments": frags}

    ia = segments[frags.quad, 0]
    ib = segments[frags.quad, 1]
    a = t.gather(ndc, ia)
    b = t.gather(ndc, ib)
    zbar = (t.gather(z, ia) + t.gather(z, ib)) * 0.5
    zeta = -zbar
    wf = wconst / zbar

    px = _pixel_centers_ndc(H, W)[frags.pixel]
    e = b - a
    pa = px - a
    denom = t.sum_(e * e, axis=-1) + 1e-18
    tt = t.clamp(t.sum_(pa * e, axis=-1) / denom, 0.0, 1.0)
    closest = a + t.reshape(tt, (frags.count, 1)) * e
    diff = px - closest
    dist = t.sqrt(t.sum_(diff * diff, axis=-1) + 1e-12)
    delta = dist - wf
    p = t.sigmoid((delta * t.absolute(delta)) * (-1.0 / settings.sigma))
    p = t.minimum(p, 1.0 - 1e-9)

    m = 1.0 - t.exp(t.segment_sum(t.log1p(-p), frags.pixel, npix))

    # depth softmax among fragments; the per-pixel shift is constant and
    # cancels exactly in the normalized weights
    shift = np.full(npix, -np.inf)
    np.maximum.at(shift, frags.pixel, zeta.value)
    score = p * t.exp((zeta - shift[frags.pixel]) * (1.0 / settings.gamma))
    total = t.segment_sum(score, frags.pixel, npix)
    tg = t.gather(total, frags.pixel)
    tg = tg + np.where(tg.value == 0.0, 1.0, 0.0)
    frac = score / tg

    if isinstance(colors, Var):
        cf = t.gather(colors, strand_of[frags.quad])
    else:
        cf = np.asarray(colors)[strand_of[frags.quad]]
    fg = t.segment_sum(cf * t.reshape(frac, (frags.count, 1)),
                       frags.pixel, npix)
    mr = t.reshape(m, (npix, 1))
    image = mr * fg + (1.0 - mr) * bg
    return {"image": t.reshape(image, (H, W, 3)),
            "silhouette": t.reshape(m, (H, W)), "fragments": frags}


# ---------------------------------------------------------------------------
# references

def hard_render(points: Array, colors: Array, segments: Array,
                strand_of: Array, cam, width: float, image_size,
                bust_depth: Array | None = None, background=None):
    """Z-buffered limit of the soft model: binary coverage, nearest wins."""
    W, H = image_size
    pc = points @ cam.rotation.T + cam.translation
    z = np.maximum(pc[:, 2], 1e-6)
    xn = (pc[:, 0] / z) * (2.0 * cam.fx / W) + (2.0 * cam.cx / W - 1.0)
    yn = (pc[:, 1] / z) * (2.0 * cam.fy / H) + (2.0 * cam.cy / H - 1.0)
    ndc = np.column_stack([xn, yn])
    wconst = width * 2.0 * cam.fx / W

    bg = background if background is not None else np.zeros(3)
    img = np.tile(np.asarray(bg, dtype=np.float64), (H * W, 1))
    mask = np.zeros(H * W)
    best = np.full(H * W, np.inf)
    centers = _pixel_centers_ndc(H, W)
    for q in range(len(segments)):
        za, zb = z[segments[q, 0]], z[segments[q, 1]]
        if za <= 1e-6 or zb <= 1e-6:
            continue
        zbar = 0.5 * (za + zb)
        a, b = ndc[segments[q, 0]], ndc[segments[q, 1]]
        wq = wconst / zbar
        to_px = np.array([0.5 * W, 0.5 * H])
        lo = np.clip(np.floor((np.minimum(a, b) + 1) * to_px - wq * to_px - 1),
                     0, [W - 1, H - 1]).astype(int)
        hi = np.clip(np.ceil((np.maximum(a, b) + 1) * to_px + wq * to_px + 1),
                     0, [W - 1, H - 1]).astype(int)
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        gx, gy = np.meshgrid(xs, ys)
        pidx = (gy * W + gx).ravel()
        d = _point_segment_dist(centers[pidx], a[None], b[None])
        inside = d <= wq
        if bust_depth is not None:
            inside &= zbar <= bust_depth.ravel()[pidx] + 1e-6
        sel = pidx[inside & (zbar < best[pidx])]
        best[sel] = zbar
        img[sel] = colors[strand_of[q]]
        mask[sel] = 1.0
    return img.reshape(H, W, 3), mask.reshape(H, W)


def brute_soft_render(points: Array, colors: Array, segments: Array,
                      strand_of: Array, cam, width: float, image_size,
                      settings: SoftRasterSettings,
                      bust_depth: Array | None = None, background=None):
    """Forward-only reference: every pixel against every quad, no tiling,
    no fragment cap.  Semantics must match soft_render when the fragment
    cap does not bind."""
    W, H = image_size
    pc = points @ cam.rotation.T + cam.translation
    z = np.maximum(pc[:, 2], 1e-6)
    xn = (pc[:, 0] / z) * (2.0 * cam.fx / W) + (2.0 * cam.cx / W - 1.0)
    yn = (pc[:, 1] / z) * (2.0 * cam.fy / H) + (2.0 * cam.cy / H - 1.0)
    ndc = np.column_stack([xn, yn])
    wconst = width * 2.0 * cam.fx / W

    za = z[segments[:, 0]]
    zb = z[segments[:, 1]]
    zbar = 0.5 * (za + zb)
    ok = (za > 1e-6) & (zb > 1e-6)
    a, b = ndc[segments[:, 0]], ndc[segments[:, 1]]
    wq = wconst / zbar
    centers = _pixel_centers_ndc(H, W)

    d = _point_segment_dist(centers[:, None, :], a[None], b[None])  # (P, Q)
    cover = ok[None] & (d <= (wq + np.sqrt(settings.blur))[None])
    if bust_depth is not None:
        cover &= zbar[None] <= bust_depth.ravel()[:, None] + settings.occlusion_eps
    # same distance regularizer as the differentiable path
    delta = np.sqrt(d * d + 1e-12) - wq[None]
    p = 1.0 / (1.0 + np.exp(np.clip(delta * np.abs(delta) / settings.sigma,
                                    -500, 500)))
    p = np.minimum(p, 1.0 - 1e-9) * cover
    m = 1.0 - np.exp(np.log1p(-p).sum(axis=1))

    zeta = -zbar
    shift = np.where(cover, zeta[None], -np.inf).max(axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    score = p * np.exp(np.where(cover, (zeta[None] - shift[:, None])
                                / settings.gamma, 0.0)) * cover
    tot = score.sum(axis=1)
    frac = score / np.where(tot > 0, tot, 1.0)[:, None]
    fg = frac @ colors[strand_of]
    bg = background if background is not None else np.zeros(3)
    img = m[:, None] * fg + (1 - m[:, None]) * bg
    return img.reshape(H, W, 3), m.reshape(H, W)
