"""Image-space hair orientation: Gabor filtering and the direction loss.

An oriented filter bank scores each pixel against a set of stripe
directions; the argmax labels the pixel with an angle in [0, pi) measured
from the +u image axis, and the response distribution yields a circular
variance used as an inverse confidence weight.

The direction loss compares these labels with the projection of the 3D
direction field: each pixel ray is traced to the first hair surface, the
field is sampled there, and the 3D direction is pushed through the camera
to an image-plane angle.  Surface tracing is differentiable in the grid
node values through the implicit dependence of the crossing point.
"""
from __future__ import annotations

import numpy as np
import scipy.fft

from . import adtape as t
from .adtape import Var
from .fields import SdfGrid, _trilinear, grid_sample, ray_box_intersection

Array = np.ndarray

FILTER_COUNT = 180
SIGMA_ALONG = 1.8    # along the carrier (across the stripes)
SIGMA_ACROSS = 2.4
FREQUENCY = 0.23     # carrier, cycles per pixel
INVALID_VARIANCE = np.pi ** 2 / 4.0


def gabor_bank(count: int = FILTER_COUNT, sigma_along: float = SIGMA_ALONG,
               sigma_across: float = SIGMA_ACROSS,
               frequency: float = FREQUENCY) -> Array:
    """Zero-mean, L2-normalized oriented kernels, (count, K, K).

    Kernel b responds maximally to stripes along angle pi*b/count; the
    cosine carrier runs perpendicular to the stripe direction.
    """
    radius = int(np.ceil(3.0 * max(sigma_along, sigma_across)))
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    bank = np.empty((count, 2 * radius + 1, 2 * radius + 1))
    for b in range(count):
        carrier = np.pi * b / count + np.pi / 2.0
        xr = x * np.cos(carrier) + y * np.sin(carrier)
        yr = -x * np.sin(carrier) + y * np.cos(carrier)
        k = np.exp(-xr ** 2 / (2 * sigma_along ** 2)
                   - yr ** 2 / (2 * sigma_across ** 2)) \
            * np.cos(2 * np.pi * frequency * xr)
        k -= k.mean()
        bank[b] = k / np.linalg.norm(k)
    return bank


def _bank_correlate(gray: Array, bank: Array, chunk: int = 30) -> Array:
    """|response| of every kernel at every pixel, (count, H, W) float32.

    Reflect padding at the borders; one image FFT shared by all kernels
    (the kernels are even-symmetric, so convolution equals correlation).
    """
    count, K, _ = bank.shape
    r = (K - 1) // 2
    H, W = gray.shape
    padded = np.pad(gray, r, mode="reflect")
    fs = (scipy.fft.next_fast_len(H + 4 * r), scipy.fft.next_fast_len(W + 4 * r))
    im_f = scipy.fft.rfft2(padded, fs)
    resp = np.empty((count, H, W), dtype=np.float32)
    for lo in range(0, count, chunk):
        kb = bank[lo:lo + chunk]
        kf = scipy.fft.rfft2(kb, fs)
        full = scipy.fft.irfft2(im_f[None] * kf, fs)
        resp[lo:lo + chunk] = np.abs(full[:, 2 * r:2 * r + H, 2 * r:2 * r + W])
    return resp


def orientation_map(gray: Array, bank: Array | None = None):
    """Per-pixel stripe angle in [0, pi) and circular variance.

    Pixels with no filter response (constant neighborhoods, the kernels
    are zero-mean) get angle 0 and the sentinel variance pi^2/4.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if bank is None:
        bank = gabor_bank()
    count = len(bank)
    resp = _bank_correlate(gray, bank)
    sums = resp.sum(axis=0, dtype=np.float64)
    best = resp.argmax(axis=0)
    angle = np.pi * best / count
    # squared circular distance between bins depends only on the bin offset
    offs = np.arange(count)
    dist = np.minimum(offs, count - offs) * np.pi / count
    table = dist ** 2
    var = np.zeros_like(sums)
    for b in range(count):
        var += resp[b] * table[(b - best) % count]
    invalid = sums < 1e-9
    var = np.where(invalid, INVALID_VARIANCE, var / np.where(invalid, 1.0, sums))
    angle = np.where(invalid, 0.0, angle)
    return angle, var


def angle_distance(a, b, period: float = np.pi):
    """Smallest wrapped difference |a - b| on a `period`-periodic circle."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % period
    return np.minimum(d, period - d)


# ---------------------------------------------------------------------------
# projecting 3D directions to image angles

def project_direction_angle(cam, points: Array, dirs: Array) -> Array:
    """Image-plane angle in [0, pi) of a 3D line (point, direction)."""
    points = np.atleast_2d(points)
    dirs = np.atleast_2d(dirs)
    Xc = points @ cam.rotation.T + cam.translation
    Dc = dirs @ cam.rotation.T
    du = cam.fx * (Dc[:, 0] * Xc[:, 2] - Xc[:, 0] * Dc[:, 2])
    dv = cam.fy * (Dc[:, 1] * Xc[:, 2] - Xc[:, 1] * Dc[:, 2])
    return np.arctan2(dv, du) % np.pi


def plucker_project(x, d, cam):
    """Angle of one projected 3D line; scalar front end to the batched form.

    Flipping d leaves the angle unchanged (lines have no orientation)."""
    return float(project_direction_angle(cam, x, d)[0])


def _project_direction_angle_tape(cam, points: Var, dirs: Var) -> Var:
    """Tape version of :func:`project_direction_angle`, range (-pi, pi]."""
    Rt = cam.rotation.T.copy()
    Xc = t.matmul(points, Rt) + cam.translation
    Dc = t.matmul(dirs, Rt)
    xs = (slice(None), 0)
    ys = (slice(None), 1)
    zs = (slice(None), 2)
    du = (Dc[xs] * Xc[zs] - Xc[xs] * Dc[zs]) * cam.fx
    dv = (Dc[ys] * Xc[zs] - Xc[ys] * Dc[zs]) * cam.fy
    # the shared 1/Zc^2 factor is positive and cancels in atan2; the bias
    # keeps the backward pass finite when a direction projects to a point
    return t.atan2(dv, du + 1e-20)


# ---------------------------------------------------------------------------
# ray / SDF surface intersection as a tape operation

def trace_surface(grid, origins: Array, dirs: Array, bbox_min, bbox_max,
                  max_steps: int = 64, bisections: int = 32):
    """First zero crossing of the grid SDF along each ray.

    Marches by the sampled distance (floored to a quarter cell so thin
    positive regions cannot stall it), then refines the bracket by
    bisection.  Returns (points, hit mask); `points` is a Var when `grid`
    is one, with the gradient routed to the node values via the implicit
    relation f(x(theta); theta) = 0.  Ray geometry is constant.
    """
    gv = grid.value if isinstance(grid, Var) else np.asarray(grid)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    sdf = SdfGrid(bbox_min, bbox_max, gv)
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    P = len(origins)
    tn, tf, boxhit = ray_box_intersection(origins, dirs, bbox_min, bbox_max)
    tcur = np.where(boxhit, tn + 1e-9, 0.0)
    tprev = tcur.copy()
    active = boxhit.copy()
    hit = np.zeros(P, dtype=bool)
    lo = np.zeros(P)
    hi = np.zeros(P)
    min_step = 0.25 * float(sdf.cell.min())
    for _ in range(max_steps):
        if not active.any():
            break
        x = origins + tcur[:, None] * dirs
        f = sdf.sample(x)
        crossed = active & (f <= 0.0)
        hit |= crossed
        lo[crossed] = tprev[crossed]
        hi[crossed] = tcur[crossed]
        active &= ~crossed
        step = np.maximum(f, min_step)
        tprev = np.where(active, tcur, tprev)
        tcur = tcur + np.where(active, step, 0.0)
        active &= tcur <= tf
    for _ in range(bisections):
        if not hit.any():
            break
        mid = 0.5 * (lo + hi)
        fm = sdf.sample(origins + mid[:, None] * dirs)
        neg = fm <= 0.0
        hi = np.where(hit & neg, mid, hi)
        lo = np.where(hit & ~neg, mid, lo)
    ts = np.where(hit, 0.5 * (lo + hi), tf)
    xs = origins + ts[:, None] * dirs
    if not isinstance(grid, Var):
        return xs, hit

    flat, w8, _, _ = _trilinear(bbox_min, sdf.cell, sdf.resolution, xs)
    _, gradf = sdf.sample(xs, with_gradient=True)
    denom = (gradf * dirs).sum(axis=1)
    sign = np.where(denom >= 0.0, 1.0, -1.0)
    denom_safe = sign * np.maximum(np.abs(denom), 1e-8)

    def vjp(g):
        gt = (g.reshape(P, 3) * dirs).sum(axis=1)
        coef = np.where(hit, -gt / denom_safe, 0.0)
        contrib = coef[:, None] * w8
        acc = np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=gv.size)
        return acc.reshape(gv.shape)

    out = grid.tape._record("trace_surface", xs, [(grid.index, vjp)])
    return out, hit


def loss_dir(hair_grid: Var, direction_grid, cam, pixels: Array,
             target_angle: Array, target_variance: Array, hair_mask: Array,
             bbox_min, bbox_max, variance_floor: float = 1e-4) -> Var:
    """Confidence-weighted angular mismatch at sampled pixels.

    `pixels` are (u, v) centers; targets and mask are per-pixel values from
    the orientation map and the hair matte.  Rays that miss the hair
    surface, pixels with the invalid-variance sentinel, and directions
    that project to a point are gated out of the sum (constant gates).
    Mean over the supplied pixels.
    """
    o, d = cam.pixel_rays(pixels[:, 0], pixels[:, 1])
    xs, hit = trace_surface(hair_grid, o, d, bbox_min, bbox_max)
    beta = grid_sample(direction_grid, xs, bbox_min, bbox_max)
    ahat = _project_direction_angle_tape(cam, xs, beta)
    delta = target_angle - ahat
    wrap = np.pi * np.floor(delta.value / np.pi)
    r = delta - wrap
    dist = t.minimum(r, np.pi - r)

    Xc = xs.value @ cam.rotation.T + cam.translation
    Dc = beta.value @ cam.rotation.T
    du = cam.fx * (Dc[:, 0] * Xc[:, 2] - Xc[:, 0] * Dc[:, 2])
    dv = cam.fy * (Dc[:, 1] * Xc[:, 2] - Xc[:, 1] * Dc[:, 2])
    degenerate = du * du + dv * dv < 1e-18
    valid = hit & ~degenerate & (target_variance < INVALID_VARIANCE - 1e-9)
    w = np.where(valid, hair_mask / np.maximum(target_variance, variance_floor) ** 2, 0.0)
    return t.sum_(dist * w) * (1.0 / max(len(pixels), 1))
