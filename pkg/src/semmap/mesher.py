"""Surface extraction from SDF volumes and mesh utilities."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


@dataclass
class SdfGrid:
    """Regular SDF samples; values[i, j, k] = f(origin + (i, j, k) * spacing)."""

    values: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("SDF grid must be 3-D with at least 2 samples per axis")
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of vertex range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("per-vertex colors must match vertex count")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def sample_sdf_grid(sdf_fn, box_min, box_max, resolution, chunk=65536) -> SdfGrid:
    """Evaluate an SDF callable on a regular grid over [box_min, box_max].

    resolution is samples per axis (scalar or 3-vector); endpoints included.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if np.any(res < 2):
        raise ValueError("resolution must be >= 2 per axis")
    if np.any(box_max <= box_min):
        raise ValueError("box_max must exceed box_min")
    axes = [np.linspace(box_min[a], box_max[a], res[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts))
    for i in range(0, len(pts), chunk):
        vals[i : i + chunk] = np.asarray(sdf_fn(pts[i : i + chunk])).reshape(-1)
    spacing = (box_max - box_min) / (res - 1)
    return SdfGrid(vals.reshape(tuple(res)), box_min, spacing)


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-surface; a grid with no crossing yields an empty mesh."""
    if not np.all(np.isfinite(grid.values)):
        raise ValueError("SDF grid contains non-finite values")
    try:
        verts, faces, _, _ = measure.marching_cubes(
            grid.values, level=iso, spacing=tuple(grid.spacing)
        )
    except ValueError:
        # level outside the value range: no surface in this volume
        return TriangleMesh.empty()
    return TriangleMesh(verts + grid.origin, faces.astype(np.int64))


def merge_submeshes(meshes_with_offsets) -> TriangleMesh:
    """Concatenate (mesh, world_offset) pairs into one mesh.

    Vertices translate by their offset, indices shift; coincident boundary
    vertices are kept duplicated (no welding).
    """
    verts, faces, cols = [], [], []
    base = 0
    any_colors = any(m.colors is not None for m, _ in meshes_with_offsets)
    for mesh, off in meshes_with_offsets:
        if mesh.is_empty:
            continue
        verts.append(mesh.vertices + np.asarray(off, dtype=np.float64))
        faces.append(mesh.triangles + base)
        if any_colors:
            c = mesh.colors if mesh.colors is not None else np.zeros_like(mesh.vertices)
            cols.append(c)
        base += len(mesh.vertices)
    if not verts:
        return TriangleMesh.empty()
    return TriangleMesh(
        np.vstack(verts), np.vstack(faces), np.vstack(cols) if any_colors else None
    )


def color_mesh(mesh: TriangleMesh, color_fn, chunk=65536) -> TriangleMesh:
    """Attach per-vertex colors from a points -> (n,3) callable."""
    if mesh.is_empty:
        return mesh
    cols = np.empty_like(mesh.vertices)
    for i in range(0, len(mesh.vertices), chunk):
        cols[i : i + chunk] = np.clip(color_fn(mesh.vertices[i : i + chunk]), 0.0, 1.0)
    return TriangleMesh(mesh.vertices, mesh.triangles, cols)


def save_ply(mesh: TriangleMesh, path):
    """ASCII PLY with optional uchar vertex colors."""
    has_c = mesh.colors is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if has_c:
            f.write(
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            )
        f.write(f"element face {len(mesh.triangles)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        if has_c:
            c255 = np.clip(np.round(mesh.colors * 255), 0, 255).astype(int)
            for v, c in zip(mesh.vertices, c255):
                f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        else:
            for v in mesh.vertices:
                f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in mesh.triangles:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def load_ply(path) -> TriangleMesh:
    """Reader for the ASCII PLY subset written by save_ply."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        n_v = n_f = 0
        has_c = False
        for line in f:
            tok = line.split()
            if tok[:2] == ["element", "vertex"]:
                n_v = int(tok[2])
            elif tok[:2] == ["element", "face"]:
                n_f = int(tok[2])
            elif tok[:3] == ["property", "uchar", "red"]:
                has_c = True
            elif tok[0] == "end_header":
                break
        verts = np.empty((n_v, 3))
        cols = np.empty((n_v, 3)) if has_c else None
        for i in range(n_v):
            tok = f.readline().split()
            verts[i] = [float(x) for x in tok[:3]]
            if has_c:
                cols[i] = [int(x) / 255.0 for x in tok[3:6]]
        faces = np.empty((n_f, 3), dtype=np.int64)
        for i in range(n_f):
            tok = f.readline().split()
            if tok[0] != "3":
                raise ValueError("only triangle faces supported")
            faces[i] = [int(x) for x in tok[1:4]]
    return TriangleMesh(verts, faces, cols)


def hausdorff_distance(a: TriangleMesh, b: TriangleMesh) -> float:
    """Symmetric vertex-to-vertex Hausdorff distance between two meshes."""
    if a.is_empty or b.is_empty:
        raise ValueError("Hausdorff distance undefined for empty meshes")
    ta, tb = cKDTree(a.vertices), cKDTree(b.vertices)
    d_ab = tb.query(a.vertices)[0].max()
    d_ba = ta.query(b.vertices)[0].max()
    return float(max(d_ab, d_ba))
