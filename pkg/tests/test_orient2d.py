import numpy as np
import pytest

from helpers import fd_gradient, rel_err

from hairrecon import adtape as t
from hairrecon.cameras import look_at
from hairrecon.fields import SdfGrid
from hairrecon.orient2d import (
    FILTER_COUNT,
    FREQUENCY,
    INVALID_VARIANCE,
    angle_distance,
    gabor_bank,
    loss_dir,
    orientation_map,
    project_direction_angle,
    _project_direction_angle_tape,
    trace_surface,
)


def grating(size, angle, contrast=0.5, freq=FREQUENCY):
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2 * np.pi * freq * (-np.sin(angle) * c + np.cos(angle) * r)
    return 0.5 + contrast * np.cos(phase)


def sphere_vals(res, r=0.25, half=0.35):
    lin = np.linspace(-half, half, res)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    return np.sqrt(X * X + Y * Y + Z * Z) - r


def test_gabor_bank_normalization():
    bank = gabor_bank(count=24)
    assert bank.shape[0] == 24 and bank.shape[1] == bank.shape[2]
    assert np.max(np.abs(bank.reshape(24, -1).mean(axis=1))) < 1e-12
    norms = np.linalg.norm(bank.reshape(24, -1), axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12


def test_gabor_bank_quarter_turn_symmetry():
    bank = gabor_bank()
    q = FILTER_COUNT // 2
    # rotating a kernel by 90 degrees lands exactly on the bank entry
    # labeled 90 degrees away
    for b in (0, 13, 57):
        assert np.max(np.abs(np.rot90(bank[b]) - bank[(b + q) % FILTER_COUNT])) < 1e-12


def test_grating_angles_detected():
    bank = gabor_bank()
    for deg in (5.0, 30.0, 77.0, 95.0, 130.0, 160.0):
        a = np.radians(deg)
        angle, var = orientation_map(grating(64, a), bank)
        crop = angle[24:40, 24:40]
        err = angle_distance(crop, a)
        assert np.median(err) < np.radians(2.0), deg
        assert np.median(var[24:40, 24:40]) < 0.5


def test_constant_image_gets_sentinel():
    angle, var = orientation_map(np.full((32, 32), 0.7))
    assert np.all(var == INVALID_VARIANCE)
    assert np.all(angle == 0.0)


def test_rot90_consistency():
    bank = gabor_bank()
    a = np.radians(20.0)
    img = grating(64, a)
    ang0, _ = orientation_map(img, bank)
    ang1, _ = orientation_map(np.ascontiguousarray(np.rot90(img)), bank)
    err = angle_distance(ang1[24:40, 24:40], a + np.pi / 2)
    assert np.median(err) < np.radians(2.0)


def test_variance_orders_clean_vs_noise():
    bank = gabor_bank()
    _, v_clean = orientation_map(grating(64, 0.6), bank)
    rng = np.random.default_rng(0)
    _, v_noise = orientation_map(rng.random((64, 64)), bank)
    assert np.median(v_clean[24:40, 24:40]) < np.median(v_noise[24:40, 24:40])


def test_projected_angle_matches_two_point_oracle():
    rng = np.random.default_rng(1)
    cam = look_at(np.array([0.9, -0.4, 0.3]), np.zeros(3), [0, 0, 1], 45.0, 400, 300)
    pts = rng.uniform(-0.15, 0.15, size=(50, 3))
    dirs = rng.standard_normal((50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = project_direction_angle(cam, pts, dirs)
    eps = 1e-6
    uv1, _ = cam.project(pts)
    uv2, _ = cam.project(pts + eps * dirs)
    d = uv2 - uv1
    a_fd = np.arctan2(d[:, 1], d[:, 0]) % np.pi
    assert np.max(angle_distance(a, a_fd)) < 1e-5


def test_projected_angle_tape_value_and_gradient():
    rng = np.random.default_rng(2)
    cam = look_at(np.array([1.0, 0.2, 0.1]), np.zeros(3), [0, 0, 1], 50.0, 320, 240)
    pts = rng.uniform(-0.1, 0.1, size=(15, 3))
    dirs = rng.standard_normal((15, 3))

    def scalar(flat):
        pv = flat[:45].reshape(15, 3)
        dv = flat[45:].reshape(15, 3)
        tape = t.Tape()
        p = tape.leaf(pv)
        d = tape.leaf(dv)
        ahat = _project_direction_angle_tape(cam, p, d)
        root = t.sum_(t.sin(ahat * 2.0))
        return tape, p, d, root

    flat = np.concatenate([pts.ravel(), dirs.ravel()])
    tape, p, d, root = scalar(flat)
    ref = project_direction_angle(cam, pts, dirs)
    assert np.max(angle_distance(root.value * 0 + ref, ref)) == 0  # shape guard
    assert np.max(angle_distance(np.asarray([v % np.pi for v in
                                             np.arctan2(np.sin(ref), np.cos(ref))]), ref)) < 1e-12
    grads = tape.backward(root)
    fd = fd_gradient(lambda x: float(scalar(x)[3].value), flat)
    got = np.concatenate([grads[p.index].ravel(), grads[d.index].ravel()])
    assert rel_err(got, fd) < 1e-6


def test_trace_surface_sphere_hits():
    vals = sphere_vals(48)
    cam = look_at(np.array([1.0, 0.0, 0.0]), np.zeros(3), [0, 0, 1], 40.0, 64, 64)
    u, v = np.meshgrid(np.arange(24, 40) + 0.5, np.arange(24, 40) + 0.5)
    o, d = cam.pixel_rays(u.ravel(), v.ravel())
    xs, hit = trace_surface(vals, o, d, [-0.35] * 3, [0.35] * 3)
    assert hit.mean() > 0.5
    r = np.linalg.norm(xs[hit], axis=1)
    assert np.max(np.abs(r - 0.25)) < 1e-3
    # the first crossing faces the camera
    assert np.all(xs[hit][:, 0] > 0.0)
    o_away, d_away = o.copy(), d.copy()
    d_away[:, 0] = np.abs(d_away[:, 0])  # point back toward +x, away from the sphere
    _, hit_away = trace_surface(vals, o_away + np.array([0.36, 0, 0]), d_away,
                                [-0.35] * 3, [0.35] * 3)
    assert not hit_away.any()


def test_trace_surface_gradient_matches_fd():
    vals = sphere_vals(12, r=0.22)
    cam = look_at(np.array([1.0, 0.1, 0.05]), np.zeros(3), [0, 0, 1], 30.0, 32, 32)
    u, v = np.meshgrid(np.arange(13, 19) + 0.5, np.arange(14, 17) + 0.5)
    o, d = cam.pixel_rays(u.ravel(), v.ravel())
    rng = np.random.default_rng(3)
    r = rng.standard_normal((len(o), 3))

    def scalar(flat):
        tape = t.Tape()
        gv = tape.leaf(flat.reshape(12, 12, 12))
        xs, hit = trace_surface(gv, o, d, [-0.35] * 3, [0.35] * 3)
        w = r * hit[:, None]
        return tape, gv, t.sum_(xs * w), hit

    tape, gv, root, hit = scalar(vals.ravel())
    assert hit.all()
    grads = tape.backward(root)
    fd = fd_gradient(lambda x: float(scalar(x)[2].value), vals.ravel())
    assert rel_err(grads[gv.index].ravel(), fd) < 1e-4


def test_loss_dir_zero_when_field_matches_targets():
    vals = sphere_vals(32)
    beta = np.broadcast_to(np.array([0.0, 0.6, 0.8]), (6, 6, 6, 3)).copy()
    bgrid = SdfGrid([-0.35] * 3, [0.35] * 3, np.zeros((2, 2, 2)))  # bbox only
    cam = look_at(np.array([1.0, 0.0, 0.0]), np.zeros(3), [0, 0, 1], 40.0, 64, 64)
    u, v = np.meshgrid(np.arange(28, 36) + 0.5, np.arange(28, 36) + 0.5)
    pixels = np.column_stack([u.ravel(), v.ravel()])
    o, d = cam.pixel_rays(pixels[:, 0], pixels[:, 1])
    xs, hit = trace_surface(vals, o, d, bgrid.bbox_min, bgrid.bbox_max)
    assert hit.all()
    target = project_direction_angle(cam, xs, np.broadcast_to([0.0, 0.6, 0.8], xs.shape))
    tape = t.Tape()
    hv = tape.leaf(vals)
    bv = tape.leaf(beta)
    out = loss_dir(hv, bv, cam, pixels, target, np.full(len(pixels), 0.01),
                   np.ones(len(pixels)), bgrid.bbox_min, bgrid.bbox_max)
    assert float(out.value) < 1e-10


def test_loss_dir_gradient_matches_fd():
    rng = np.random.default_rng(4)
    vals = sphere_vals(8, r=0.22)
    beta = rng.standard_normal((4, 4, 4, 3)) * 0.5 + np.array([0.0, 0.7, 0.7])
    cam = look_at(np.array([1.0, 0.05, 0.1]), np.zeros(3), [0, 0, 1], 30.0, 32, 32)
    u, v = np.meshgrid(np.arange(13, 19) + 0.5, np.arange(14, 17) + 0.5)
    pixels = np.column_stack([u.ravel(), v.ravel()])
    # keep the wrapped angular distance away from its kinks at 0 and pi/2
    # so central differences see a smooth function
    o, d = cam.pixel_rays(pixels[:, 0], pixels[:, 1])
    xs0, _ = trace_surface(vals, o, d, [-0.35] * 3, [0.35] * 3)
    from hairrecon.fields import OrientGrid

    b0 = OrientGrid([-0.35] * 3, [0.35] * 3, beta).sample(xs0)
    a0 = project_direction_angle(cam, xs0, b0)
    targets = a0 + rng.uniform(0.15, 0.55, len(pixels))
    variances = rng.uniform(0.01, 0.3, len(pixels))
    mask = rng.uniform(0.2, 1.0, len(pixels))
    bmin, bmax = np.array([-0.35] * 3), np.array([0.35] * 3)

    def scalar(flat):
        tape = t.Tape()
        hv = tape.leaf(flat[: vals.size].reshape(vals.shape))
        bv = tape.leaf(flat[vals.size:].reshape(beta.shape))
        out = loss_dir(hv, bv, cam, pixels, targets, variances, mask, bmin, bmax)
        return tape, hv, bv, out

    flat = np.concatenate([vals.ravel(), beta.ravel()])
    tape, hv, bv, out = scalar(flat)
    grads = tape.backward(out)
    fd = fd_gradient(lambda x: float(scalar(x)[3].value), flat, h=1e-7)
    got = np.concatenate([grads[hv.index].ravel(), grads[bv.index].ravel()])
    assert rel_err(got, fd) < 1e-4
