import numpy as np
import pytest

from semmap.mesher import (
    SdfGrid,
    TriangleMesh,
    color_mesh,
    hausdorff_distance,
    load_ply,
    marching_cubes,
    merge_submeshes,
    sample_sdf_grid,
    save_ply,
)


def sphere_sdf(c=(0, 0, 0), r=1.0):
    c = np.asarray(c, dtype=np.float64)
    return lambda p: np.linalg.norm(p - c, axis=-1) - r


def sphere_mesh(res=48, r=1.0):
    grid = sample_sdf_grid(sphere_sdf(r=r), [-1.5] * 3, [1.5] * 3, res)
    return marching_cubes(grid), grid


# ---------------------------------------------------------------------------
# containers


def test_sdf_grid_validation():
    with pytest.raises(ValueError, match="3-D"):
        SdfGrid(np.zeros((4, 4)), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError, match="spacing"):
        SdfGrid(np.zeros((4, 4, 4)), np.zeros(3), [1, 0, 1])
    g = SdfGrid(np.zeros((2, 3, 4)), [1, 2, 3], [0.1, 0.2, 0.3])
    assert g.values.shape == (2, 3, 4)


def test_triangle_mesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(ValueError, match="indices"):
        TriangleMesh(v, [[0, 1, 3]])
    with pytest.raises(ValueError, match="colors"):
        TriangleMesh(v, [[0, 1, 2]], colors=np.zeros((2, 3)))
    assert TriangleMesh.empty().is_empty
    assert not TriangleMesh(v, [[0, 1, 2]]).is_empty


# ---------------------------------------------------------------------------
# sampling


def test_sample_sdf_grid_exact_layout():
    fn = lambda p: p[:, 0] + 10 * p[:, 1] + 100 * p[:, 2]
    g = sample_sdf_grid(fn, [0, 0, 0], [1, 2, 3], (3, 5, 4))
    assert g.values.shape == (3, 5, 4)
    assert np.allclose(g.spacing, [0.5, 0.5, 1.0])
    # values[i,j,k] = f(origin + (i,j,k) * spacing)
    assert g.values[0, 0, 0] == 0.0
    assert g.values[2, 0, 0] == pytest.approx(1.0)
    assert g.values[1, 3, 2] == pytest.approx(0.5 + 15.0 + 200.0)
    with pytest.raises(ValueError, match="resolution"):
        sample_sdf_grid(fn, [0, 0, 0], [1, 1, 1], 1)
    with pytest.raises(ValueError, match="box_max"):
        sample_sdf_grid(fn, [0, 0, 0], [1, -1, 1], 4)


def test_sample_sdf_grid_chunking_consistent():
    fn = sphere_sdf()
    a = sample_sdf_grid(fn, [-1] * 3, [1] * 3, 16, chunk=100)
    b = sample_sdf_grid(fn, [-1] * 3, [1] * 3, 16, chunk=1 << 20)
    assert np.array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# marching cubes


def test_marching_cubes_sphere_accuracy():
    mesh, grid = sphere_mesh(res=48)
    assert not mesh.is_empty
    rad = np.linalg.norm(mesh.vertices, axis=1)
    h = grid.spacing.max()
    assert np.abs(rad - 1.0).max() < h  # vertices on the surface up to a voxel
    assert mesh.triangles.min() >= 0
    assert mesh.triangles.max() < len(mesh.vertices)
    lo = grid.origin
    hi = grid.origin + grid.spacing * (np.array(grid.values.shape) - 1)
    assert np.all(mesh.vertices >= lo - 1e-9) and np.all(mesh.vertices <= hi + 1e-9)


def test_marching_cubes_iso_offset():
    grid = sample_sdf_grid(sphere_sdf(), [-2] * 3, [2] * 3, 64)
    mesh = marching_cubes(grid, iso=0.25)
    rad = np.linalg.norm(mesh.vertices, axis=1)
    assert abs(np.median(rad) - 1.25) < grid.spacing.max()


def test_marching_cubes_no_crossing_is_empty():
    g = SdfGrid(np.full((4, 4, 4), 2.0), np.zeros(3), np.ones(3))
    assert marching_cubes(g).is_empty
    with pytest.raises(ValueError, match="finite"):
        marching_cubes(SdfGrid(np.full((2, 2, 2), np.nan), np.zeros(3), np.ones(3)))


def test_marching_cubes_origin_translation():
    fn0 = sphere_sdf((0, 0, 0))
    fn1 = sphere_sdf((5, 5, 5))
    m0 = marching_cubes(sample_sdf_grid(fn0, [-1.5] * 3, [1.5] * 3, 24))
    m1 = marching_cubes(sample_sdf_grid(fn1, [3.5] * 3, [6.5] * 3, 24))
    assert np.allclose(m1.vertices - 5.0, m0.vertices, atol=1e-12)
    assert np.array_equal(m0.triangles, m1.triangles)


# ---------------------------------------------------------------------------
# merging / coloring


def test_merge_submeshes_offsets_and_indexing():
    m, _ = sphere_mesh(res=16)
    merged = merge_submeshes([(m, [0, 0, 0]), (m, [10, 0, 0])])
    n = len(m.vertices)
    assert len(merged.vertices) == 2 * n
    assert np.allclose(merged.vertices[n:] - [10, 0, 0], m.vertices)
    assert np.array_equal(merged.triangles[len(m.triangles):], m.triangles + n)
    assert merge_submeshes([(TriangleMesh.empty(), [0, 0, 0])]).is_empty
    # empty submeshes are skipped without shifting indices
    both = merge_submeshes([(TriangleMesh.empty(), [1, 1, 1]), (m, [0, 0, 0])])
    assert len(both.vertices) == n


def test_merge_mixed_colors_padded():
    m, _ = sphere_mesh(res=12)
    mc = color_mesh(m, lambda p: np.full_like(p, 0.5))
    merged = merge_submeshes([(mc, [0, 0, 0]), (m, [5, 0, 0])])
    assert merged.colors is not None
    assert np.all(merged.colors[: len(m.vertices)] == 0.5)
    assert np.all(merged.colors[len(m.vertices):] == 0.0)


def test_color_mesh_clips_and_maps():
    m, _ = sphere_mesh(res=12)
    out = color_mesh(m, lambda p: np.stack([p[:, 0] * 10, p[:, 1], p[:, 2]], axis=1))
    assert out.colors.min() >= 0.0 and out.colors.max() <= 1.0
    assert color_mesh(TriangleMesh.empty(), lambda p: p).is_empty


# ---------------------------------------------------------------------------
# PLY io


def test_ply_roundtrip_plain(tmp_path):
    m, _ = sphere_mesh(res=14)
    p = tmp_path / "m.ply"
    save_ply(m, p)
    back = load_ply(p)
    assert np.allclose(back.vertices, m.vertices, atol=1e-6)
    assert np.array_equal(back.triangles, m.triangles)
    assert back.colors is None


def test_ply_roundtrip_colors(tmp_path):
    m, _ = sphere_mesh(res=10)
    mc = color_mesh(m, lambda p: (p + 1.5) / 3.0)
    p = tmp_path / "c.ply"
    save_ply(mc, p)
    back = load_ply(p)
    want = np.clip(np.round(mc.colors * 255), 0, 255) / 255.0
    assert np.allclose(back.colors, want, atol=1e-12)
    head = p.read_text().splitlines()
    assert head[0] == "ply" and "property uchar red" in head


def test_load_ply_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("obj\n")
    with pytest.raises(ValueError, match="PLY"):
        load_ply(p)


# ---------------------------------------------------------------------------
# distance


def test_hausdorff_zero_and_translation():
    m, _ = sphere_mesh(res=20)
    assert hausdorff_distance(m, m) == 0.0
    shifted = TriangleMesh(m.vertices + [0.3, 0, 0], m.triangles)
    d = hausdorff_distance(m, shifted)
    assert 0.2 <= d <= 0.3001  # bounded by the offset, near it at the poles
    with pytest.raises(ValueError, match="empty"):
        hausdorff_distance(m, TriangleMesh.empty())


def test_hausdorff_is_symmetric():
    a, _ = sphere_mesh(res=18, r=1.0)
    b, _ = sphere_mesh(res=18, r=0.8)
    assert hausdorff_distance(a, b) == hausdorff_distance(b, a)
    assert abs(hausdorff_distance(a, b) - 0.2) < 0.05
