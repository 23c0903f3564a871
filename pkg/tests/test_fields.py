import numpy as np
import pytest

from helpers import fd_gradient, rel_err

from hairrecon import adtape as t
from hairrecon.cameras import Camera, look_at, ring_cameras, top_cameras
from hairrecon.fields import (
    OrientGrid,
    SdfGrid,
    TriMesh,
    closest_point_on_triangles,
    eikonal_residual,
    grid_sample,
    grid_spatial_gradient,
    marching_cubes,
    mesh_distances,
    raster_depth_ids,
    ray_box_intersection,
    sdf_sample,
    visible_faces,
)


def sphere_grid(res, r=0.25, half=0.35):
    lin = np.linspace(-half, half, res)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    vals = np.sqrt(X * X + Y * Y + Z * Z) - r
    return SdfGrid([-half] * 3, [half] * 3, vals)


def interior_points(grid, n, rng, frac_lo=0.15, frac_hi=0.85):
    # keep queries away from cell faces so finite differences stay one-sided
    res = grid.resolution
    base = rng.integers(0, res - 1, size=(n, 3))
    f = rng.uniform(frac_lo, frac_hi, size=(n, 3))
    return grid.bbox_min + (base + f) * grid.cell


def test_sample_at_nodes_exact():
    rng = np.random.default_rng(0)
    g = SdfGrid([-1, -2, 0], [1, 0, 3], rng.standard_normal((4, 5, 6)))
    i, j, k = np.meshgrid(*[np.arange(n) for n in (4, 5, 6)], indexing="ij")
    pts = g.bbox_min + np.stack([i, j, k], axis=-1).reshape(-1, 3) * g.cell
    v = g.sample(pts)
    assert np.max(np.abs(v - g.values.reshape(-1))) < 1e-12


def test_linear_field_reproduced():
    a = np.array([0.3, -1.1, 2.0])
    b = 0.7
    lin = [np.linspace(-1, 1, 8)] * 3
    X, Y, Z = np.meshgrid(*lin, indexing="ij")
    vals = a[0] * X + a[1] * Y + a[2] * Z + b
    g = SdfGrid([-1, -1, -1], [1, 1, 1], vals)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(500, 3))
    v, grad = g.sample(pts, with_gradient=True)
    exact = pts @ a + b
    assert np.max(np.abs(v - exact)) < 1e-12
    assert np.max(np.abs(grad - a)) < 1e-9


def test_sphere_sdf_accuracy():
    g = sphere_grid(64)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.35, 0.35, size=(10000, 3))
    v = g.sample(pts)
    exact = np.linalg.norm(pts, axis=1) - 0.25
    assert np.max(np.abs(v - exact)) < 0.5 * np.linalg.norm(g.cell)


def test_continuity_across_cell_faces():
    rng = np.random.default_rng(3)
    g = SdfGrid([0, 0, 0], [1, 1, 1], rng.standard_normal((6, 6, 6)))
    # straddle interior x = const node planes
    y = rng.uniform(0.1, 0.9, 200)
    z = rng.uniform(0.1, 0.9, 200)
    for i in (1, 2, 4):
        x = g.bbox_min[0] + i * g.cell[0]
        lo = np.column_stack([np.full_like(y, x - 1e-9), y, z])
        hi = np.column_stack([np.full_like(y, x + 1e-9), y, z])
        assert np.max(np.abs(g.sample(lo) - g.sample(hi))) < 1e-7


def test_outside_adds_box_distance():
    rng = np.random.default_rng(4)
    g = SdfGrid([0, 0, 0], [1, 1, 1], rng.standard_normal((5, 5, 5)))
    inside = np.array([[1.0, 0.4, 0.6]])
    out = np.array([[1.3, 0.4, 0.6]])
    v, grad = g.sample(out, with_gradient=True)
    assert abs(v[0] - (g.sample(inside)[0] + 0.3)) < 1e-12
    # clamped axes contribute only the box-distance direction
    assert abs(grad[0, 0] - 1.0) < 1e-12
    corner = np.array([[1.3, -0.4, 0.6]])
    vc = g.sample(corner)
    ref = g.sample(np.array([[1.0, 0.0, 0.6]]))[0] + np.hypot(0.3, 0.4)
    assert abs(vc[0] - ref) < 1e-12


def test_sample_gradient_matches_fd():
    rng = np.random.default_rng(5)
    g = SdfGrid([-1, -1, -1], [1, 1, 1], rng.standard_normal((7, 7, 7)))
    pts = interior_points(g, 50, rng)
    _, grad = g.sample(pts, with_gradient=True)
    h = 1e-6
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        fd = (g.sample(pts + e) - g.sample(pts - e)) / (2 * h)
        assert rel_err(grad[:, ax], fd) < 1e-6


def test_orient_grid_constant_and_linear():
    beta = np.array([0.6, 0.0, 0.8])
    vals = np.broadcast_to(beta, (4, 4, 4, 3)).copy()
    g = OrientGrid([0, 0, 0], [1, 1, 1], vals)
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 1, size=(100, 3))
    assert np.max(np.abs(g.sample(pts) - beta)) < 1e-12
    v, jac = g.sample(pts, with_gradient=True)
    assert np.max(np.abs(jac)) < 1e-9


def test_grid_sample_tape_values_and_gradients():
    rng = np.random.default_rng(7)
    vals = rng.standard_normal((4, 4, 4))
    bmin, bmax = np.zeros(3), np.ones(3)
    ref = SdfGrid(bmin, bmax, vals)
    pts = interior_points(ref, 12, rng)
    r = rng.standard_normal(12)

    tape = t.Tape()
    gv = tape.leaf(vals)
    pv = tape.leaf(pts)
    out = grid_sample(gv, pv, bmin, bmax)
    root = t.dot(out, r)
    assert abs(float(root.value) - (ref.sample(pts) * r).sum()) < 1e-12
    grads = tape.backward(root)
    fd_g = fd_gradient(
        lambda x: float((SdfGrid(bmin, bmax, x.reshape(4, 4, 4)).sample(pts) * r).sum()),
        vals.ravel(),
    )
    assert rel_err(grads[gv.index].ravel(), fd_g) < 1e-6
    fd_p = fd_gradient(
        lambda x: float((ref.sample(x.reshape(12, 3)) * r).sum()), pts.ravel()
    )
    assert rel_err(grads[pv.index].ravel(), fd_p) < 1e-6


def test_grid_sample_tape_vector_channels():
    rng = np.random.default_rng(8)
    vals = rng.standard_normal((3, 3, 3, 3))
    g = OrientGrid([0, 0, 0], [1, 1, 1], vals)
    pts = rng.uniform(0.1, 0.9, size=(9, 3))
    tape = t.Tape()
    gv = tape.leaf(vals)
    out = grid_sample(gv, pts, g.bbox_min, g.bbox_max)
    assert out.value.shape == (9, 3)
    assert np.max(np.abs(out.value - g.sample(pts))) < 1e-12
    root = t.sum_(out * out)
    grads = tape.backward(root)
    fd = fd_gradient(
        lambda x: float(
            (OrientGrid([0, 0, 0], [1, 1, 1], x.reshape(3, 3, 3, 3)).sample(pts) ** 2).sum()
        ),
        vals.ravel(),
    )
    assert rel_err(grads[gv.index].ravel(), fd) < 1e-6


def test_sdf_sample_tape_outside_matches_numpy():
    rng = np.random.default_rng(9)
    vals = rng.standard_normal((5, 5, 5))
    ref = SdfGrid(np.zeros(3), np.ones(3), vals)
    pts = np.concatenate([
        rng.uniform(0.05, 0.95, size=(8, 3)),
        rng.uniform(1.1, 1.6, size=(4, 3)),
        np.array([[0.37, -0.4, 0.52]]),  # outside along one axis only
    ])
    # keep finite differences away from cell-face kinks
    frac = (pts * 4.0) % 1.0
    pts[(frac < 0.02) | (frac > 0.98)] += 0.03
    tape = t.Tape()
    pv = tape.leaf(pts)
    out = sdf_sample(tape.leaf(vals), pv, ref.bbox_min, ref.bbox_max)
    assert np.max(np.abs(out.value - ref.sample(pts))) < 1e-10
    root = t.sum_(out)
    grads = tape.backward(root)
    fd = fd_gradient(
        lambda x: float(ref.sample(x.reshape(-1, 3)).sum()), pts.ravel()
    )
    assert rel_err(grads[pv.index].ravel(), fd) < 1e-6


def test_grid_spatial_gradient_tape():
    rng = np.random.default_rng(10)
    vals = rng.standard_normal((4, 5, 4))
    ref = SdfGrid(np.zeros(3), np.ones(3), vals)
    pts = interior_points(ref, 11, rng)
    r = rng.standard_normal((11, 3))
    tape = t.Tape()
    gv = tape.leaf(vals)
    grad = grid_spatial_gradient(gv, pts, ref.bbox_min, ref.bbox_max)
    _, gnp = ref.sample(pts, with_gradient=True)
    assert np.max(np.abs(grad.value - gnp)) < 1e-12
    root = t.sum_(grad * r)
    grads = tape.backward(root)

    def scalar(x):
        _, gg = SdfGrid(np.zeros(3), np.ones(3), x.reshape(4, 5, 4)).sample(
            pts, with_gradient=True
        )
        return float((gg * r).sum())

    fd = fd_gradient(scalar, vals.ravel())
    assert rel_err(grads[gv.index].ravel(), fd) < 1e-6
    with pytest.raises(TypeError):
        grid_spatial_gradient(gv, tape.leaf(pts), ref.bbox_min, ref.bbox_max)


def test_eikonal_residual_values():
    lin = [np.linspace(-1, 1, 6)] * 3
    X, Y, Z = np.meshgrid(*lin, indexing="ij")
    g1 = SdfGrid([-1] * 3, [1] * 3, X)
    g2 = SdfGrid([-1] * 3, [1] * 3, 2.0 * X)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.9, 0.9, size=(50, 3))
    assert np.max(eikonal_residual(g1, pts)) < 1e-18
    assert np.max(np.abs(eikonal_residual(g2, pts) - 1.0)) < 1e-12


def test_ray_box_intersection():
    bmin, bmax = np.zeros(3), np.ones(3)
    o = np.array([[-1.0, 0.5, 0.5], [0.5, 0.5, 0.5], [-1.0, 5.0, 0.5]])
    d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    tn, tf, hit = ray_box_intersection(o, d, bmin, bmax)
    assert hit[0] and abs(tn[0] - 1.0) < 1e-12 and abs(tf[0] - 2.0) < 1e-12
    assert hit[1] and tn[1] == 0.0 and abs(tf[1] - 0.5) < 1e-12
    assert not hit[2]


def test_marching_cubes_sphere_area_and_levelset():
    g = sphere_grid(128)
    mesh = marching_cubes(g)
    area = mesh.area()
    exact = 4.0 * np.pi * 0.25 ** 2
    assert abs(area - exact) / exact < 0.02
    v = np.abs(g.sample(mesh.vertices))
    assert np.max(v) < 1e-3 * g.diagonal


def test_marching_cubes_requires_sign_change():
    g = SdfGrid([0, 0, 0], [1, 1, 1], np.ones((4, 4, 4)))
    with pytest.raises(ValueError):
        marching_cubes(g)


def test_marching_cubes_plane():
    lin = [np.linspace(-1, 1, 32)] * 3
    X, Y, Z = np.meshgrid(*lin, indexing="ij")
    g = SdfGrid([-1] * 3, [1] * 3, Z - 0.01)
    mesh = marching_cubes(g)
    assert len(mesh.faces) > 0
    assert np.max(np.abs(mesh.vertices[:, 2] - 0.01)) < 1e-5


def test_closest_point_hand_cases():
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
    p = np.array([[0.2, 0.3, 0.7]])
    cp = closest_point_on_triangles(p, tri)
    assert np.allclose(cp, [[0.2, 0.3, 0.0]], atol=1e-12)
    p = np.array([[2.0, -1.0, 0.5]])
    cp = closest_point_on_triangles(p, tri)
    assert np.allclose(cp, [[1.0, 0.0, 0.0]], atol=1e-12)
    p = np.array([[0.5, -2.0, 0.0]])
    cp = closest_point_on_triangles(p, tri)
    assert np.allclose(cp, [[0.5, 0.0, 0.0]], atol=1e-12)


def test_closest_point_matches_dense_sampling():
    rng = np.random.default_rng(12)
    tris = rng.standard_normal((20, 3, 3))
    pts = rng.standard_normal((20, 3))
    cp = closest_point_on_triangles(pts, tris)
    d = np.linalg.norm(pts - cp, axis=1)
    # dense barycentric sweep as the oracle
    n = 60
    a = np.linspace(0, 1, n)
    A, B = np.meshgrid(a, a)
    keep = A + B <= 1.0
    bar = np.column_stack([A[keep], B[keep], 1.0 - A[keep] - B[keep]])
    for i in range(20):
        samples = bar @ tris[i]
        brute = np.linalg.norm(samples - pts[i], axis=1).min()
        assert d[i] <= brute + 1e-12
        assert brute - d[i] < 0.1  # sweep spacing bound


def test_mesh_distances_matches_bruteforce():
    g = sphere_grid(24)
    mesh = marching_cubes(g)
    rng = np.random.default_rng(13)
    pts = rng.uniform(-0.34, 0.34, size=(200, 3))
    d, cp, fi = mesh_distances(pts, mesh)
    tri = mesh.corners
    for i in range(0, 200, 7):
        rep = np.broadcast_to(pts[i], (len(tri), 3))
        cps = closest_point_on_triangles(rep, tri)
        dd = np.linalg.norm(cps - pts[i], axis=1)
        assert abs(d[i] - dd.min()) < 1e-12


def test_surface_sampling_is_area_weighted():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 1], [3, 1, 1], [3, 0, 2]],
                     dtype=float)
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = TriMesh(verts, faces)
    pts, fi = mesh.sample_surface(20000, np.random.default_rng(14))
    frac = (fi == 0).mean()
    a = mesh.face_areas()
    assert abs(frac - a[0] / a.sum()) < 0.02


def test_raster_depth_of_axis_aligned_quad():
    cam = look_at(np.zeros(3), [0, 0, 1.0], [0, 1, 0], 60.0, 64, 64)
    verts = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0],
                      [0.5, 0.5, 2.0], [-0.5, 0.5, 2.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    depth, fid = raster_depth_ids(verts, faces, cam)
    hit = fid >= 0
    assert hit.any()
    assert np.max(np.abs(depth[hit] - 2.0)) < 1e-9
    assert set(np.unique(fid[hit])) <= {0, 1}


def test_visible_faces_convex_oracle():
    mesh = marching_cubes(sphere_grid(16))
    cam = look_at(np.array([1.0, 0.0, 0.0]), np.zeros(3), [0, 0, 1], 45.0, 512, 512)
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    mask = visible_faces(mesh, empty, [cam])
    n = mesh.face_normals()
    to_cam = cam.position - mesh.centroids()
    to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
    dots = (n * to_cam).sum(axis=1)
    assert mask.any()
    assert np.all(dots[mask] > -1e-9)
    # sliver faces can cover no pixel center; every solid front face must win
    solid = mesh.face_areas() > 0.25 * float(np.prod(sphere_grid(16).cell[:2]))
    assert np.all(mask[(dots > 0.25) & solid])
    assert mask[dots > 0.25].mean() > 0.9


def test_visible_faces_occluded_and_monotone():
    hair = marching_cubes(sphere_grid(16, r=0.1, half=0.2))
    bust = marching_cubes(sphere_grid(16, r=0.3, half=0.4))
    ring = ring_cameras(np.zeros(3), 1.2, 4, 15.0, 45.0, 256, 256)
    assert not visible_faces(hair, bust, ring, size=256).any()
    # without the occluder, more cameras only add faces
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    m1 = visible_faces(hair, empty, ring[:2], size=256)
    m2 = visible_faces(hair, empty, ring[:2] + top_cameras(np.zeros(3), 1.2), size=256)
    assert np.all(m2[m1])
    assert m2.sum() > m1.sum()


def test_camera_project_ray_roundtrip():
    cam = look_at(np.array([0.3, -1.2, 0.5]), np.array([0.0, 0.1, 0.2]),
                  [0, 0, 1], 50.0, 320, 240)
    rng = np.random.default_rng(15)
    u = rng.uniform(0, 320, 40)
    v = rng.uniform(0, 240, 40)
    o, d = cam.pixel_rays(u, v)
    pts = o + d * rng.uniform(0.5, 3.0, 40)[:, None]
    uv, z = cam.project(pts)
    assert np.max(np.abs(uv[:, 0] - u)) < 1e-9
    assert np.max(np.abs(uv[:, 1] - v)) < 1e-9
    assert np.all(z > 0)
    uv_c, _ = cam.project(np.array([[0.0, 0.1, 0.2]]))
    assert np.allclose(uv_c, [[160.0, 120.0]], atol=1e-9)


def test_camera_json_roundtrip():
    cam = look_at(np.array([1.0, 2.0, 3.0]), np.zeros(3), [0, 0, 1], 40.0, 100, 80)
    cam2 = Camera.from_dict(cam.to_dict())
    assert np.allclose(cam.world_to_cam, cam2.world_to_cam, atol=1e-15)
    assert (cam.fx, cam.fy, cam.cx, cam.cy) == (cam2.fx, cam2.fy, cam2.cx, cam2.cy)
    assert (cam.width, cam.height) == (cam2.width, cam2.height)


def test_ring_cameras_geometry():
    cams = ring_cameras(np.array([0.1, 0.2, 0.3]), 2.0, 6, 30.0, 45.0, 64, 64)
    assert len(cams) == 6
    for c in cams:
        assert abs(np.linalg.norm(c.position - [0.1, 0.2, 0.3]) - 2.0) < 1e-9
        uv, z = c.project(np.array([[0.1, 0.2, 0.3]]))
        assert np.allclose(uv, [[32.0, 32.0]], atol=1e-9)
        assert z[0] > 0
