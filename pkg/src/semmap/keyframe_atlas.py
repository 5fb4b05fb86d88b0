"""Keyframe selection and the atlas of cube-partitioned map subspaces.

The world is split into axis-aligned cubes (default 5 m edge) on a lattice
whose origin snaps to 0.5 m so cube centers are exactly representable;
each cube owns an independent field trained in cube-centered coordinates
(local = global - center). Keyframes insert on sufficient camera motion or
elapsed time and are assigned to every cube their view frustum touches.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import FieldParams, HashGridConfig
from .renderer import CameraIntrinsics, Pose, camera_rays, rotation_angle_deg

DEFAULT_EDGE = 5.0


@dataclass(frozen=True)
class KeyframePolicy:
    """Insert when any trigger fires relative to the last inserted keyframe."""

    min_translation: float = 0.1  # meters
    min_rotation_deg: float = 10.0
    max_interval: int = 30  # frames

    def __post_init__(self):
        if self.min_translation < 0 or self.min_rotation_deg < 0:
            raise ValueError("motion thresholds must be non-negative")
        if self.max_interval < 1:
            raise ValueError("max_interval must be >= 1")


@dataclass
class Keyframe:
    kf_id: int
    frame_index: int
    timestamp: float
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray | None = None
    subspace_ids: set[int] = dc_field(default_factory=set)


@dataclass
class Subspace:
    index: int
    center: np.ndarray
    lattice: tuple[int, int, int]
    field: FieldParams
    keyframe_ids: list[int] = dc_field(default_factory=list)


@dataclass
class ArchivedMap:
    subspace_index: int
    params: FieldParams
    keyframe_ids: tuple[int, ...]
    frozen_at_frame: int


def default_field_factory(seed: int = 0, dtype=np.float32, **init_kw):
    """Fields over a centered local domain with the standard grid settings."""

    def make(domain_min, domain_max, index):
        grid = HashGridConfig(domain_min=domain_min, domain_max=domain_max)
        return FieldParams.init(grid, seed=seed + index, dtype=dtype, **init_kw)

    return make


class SubspaceAtlas:
    """Cube partition of space, keyframe store, and per-cube fields.

    The partition is half-open: a point on a shared face belongs to the
    higher-coordinate cube. Use single_map() for one field spanning the
    whole working volume.
    """

    def __init__(
        self,
        bounds_min,
        bounds_max,
        edge: float = DEFAULT_EDGE,
        field_factory=None,
        single: bool = False,
    ):
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        if not np.all(bounds_max > bounds_min):
            raise ValueError("bounds_max must exceed bounds_min")
        if edge <= 0:
            raise ValueError("cube edge must be positive")
        if field_factory is None:
            field_factory = default_field_factory()
        self.bounds_min = bounds_min
        self.bounds_max = bounds_max
        self.edge = float(edge)
        self.single = bool(single)
        self.keyframes: dict[int, Keyframe] = {}
        self.archives: list[ArchivedMap] = []
        self._next_id = 0
        self._last_inserted: Keyframe | None = None
        self.subspaces: list[Subspace] = []
        if single:
            # one map over the exact bounds; center snapped for exact shifts
            center = np.round((bounds_min + bounds_max))/2.0
            half = np.maximum(np.abs(bounds_min - center), np.abs(bounds_max - center))
            self.origin = center - half
            self.lattice_shape = (1, 1, 1)
            self.subspaces.append(
                Subspace(0, center, (0, 0, 0), field_factory(-half, half, 0))
            )
        else:
            # snap the lattice origin to 0.5 m so centers stay half-integers
            self.origin = np.floor(bounds_min * 2.0) / 2.0
            n = np.maximum(
                np.ceil((bounds_max - self.origin) / self.edge).astype(int), 1
            )
            self.lattice_shape = tuple(int(v) for v in n)
            half = np.full(3, self.edge / 2.0)
            for ix in range(n[0]):
                for iy in range(n[1]):
                    for iz in range(n[2]):
                        center = self.origin + (np.array([ix, iy, iz]) + 0.5) * self.edge
                        idx = int((ix * n[1] + iy) * n[2] + iz)
                        self.subspaces.append(
                            Subspace(
                                idx, center, (ix, iy, iz),
                                field_factory(-half, half, idx),
                            )
                        )
        self.active_index = 0

    # -- partition ---------------------------------------------------------

    def cube_of(self, point) -> int | None:
        """Index of the cube owning a point; None when outside the lattice."""
        if self.single:
            return 0
        p = np.asarray(point, dtype=np.float64).reshape(3)
        ijk = np.floor((p - self.origin) / self.edge).astype(int)
        n = self.lattice_shape
        if np.any(ijk < 0) or np.any(ijk >= n):
            return None
        return int((ijk[0] * n[1] + ijk[1]) * n[2] + ijk[2])

    def global_to_local(self, points, index: int) -> np.ndarray:
        """local = global - center; exact for float32-precision coordinates
        because centers are half-integers."""
        return np.asarray(points, dtype=np.float64) - self.subspaces[index].center

    def local_to_global(self, points, index: int) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) + self.subspaces[index].center

    # -- keyframes ---------------------------------------------------------

    def maybe_insert_keyframe(
        self,
        frame_index: int,
        timestamp: float,
        pose: Pose,
        rgb: np.ndarray,
        depth: np.ndarray,
        semantic: np.ndarray | None = None,
        policy: KeyframePolicy = KeyframePolicy(),
        intr: CameraIntrinsics | None = None,
        near: float = 0.05,
        far: float | None = None,
    ) -> int | None:
        """Insert iff this is the first frame, the camera moved or rotated
        past the policy thresholds, or more than max_interval frames passed
        since the last inserted keyframe. Returns the new id or None."""
        last = self._last_inserted
        if last is not None:
            moved = np.linalg.norm(pose.t - last.pose.t) > policy.min_translation
            turned = rotation_angle_deg(pose, last.pose) > policy.min_rotation_deg
            stale = (frame_index - last.frame_index) > policy.max_interval
            if not (moved or turned or stale):
                return None
        kf = Keyframe(self._next_id, frame_index, float(timestamp), pose, rgb, depth, semantic)
        self._next_id += 1
        self.keyframes[kf.kf_id] = kf
        self._last_inserted = kf
        if intr is not None:
            self.assign_keyframe_to_subspaces(kf.kf_id, intr, near, far)
        else:
            home = self.cube_of(pose.t)
            if home is not None:
                kf.subspace_ids.add(home)
                self.subspaces[home].keyframe_ids.append(kf.kf_id)
        home = self.cube_of(pose.t)
        if home is not None:
            self.active_index = home
        return kf.kf_id

    def assign_keyframe_to_subspaces(
        self, kf_id: int, intr: CameraIntrinsics, near: float = 0.05,
        far: float | None = None,
    ) -> set[int]:
        """Assign by probing the frustum: the four image corners and the
        center, back-projected at depths stepped from near to far no more
        than half a cube edge apart, plus the camera origin."""
        kf = self.keyframes[kf_id]
        if far is None:
            far = 1.5 * self.edge
        us = np.array([0, intr.width - 1, 0, intr.width - 1, (intr.width - 1) / 2.0])
        vs = np.array([0, 0, intr.height - 1, intr.height - 1, (intr.height - 1) / 2.0])
        o, d, _ = camera_rays(intr, kf.pose, us, vs)
        n_steps = max(2, int(np.ceil((far - near) / (self.edge / 2.0))) + 1)
        depths = np.linspace(near, far, n_steps)
        probes = [kf.pose.t[None]] + [o + d * t for t in depths]
        pts = np.vstack(probes)
        ids = set()
        for p in pts:
            c = self.cube_of(p)
            if c is not None:
                ids.add(c)
        for c in ids - kf.subspace_ids:
            self.subspaces[c].keyframe_ids.append(kf_id)
        kf.subspace_ids |= ids
        return ids

    def update_poses(self, corrections: dict[int, Pose]):
        """Replace poses of existing keyframes (pose-graph style correction)."""
        missing = [k for k in corrections if k not in self.keyframes]
        if missing:
            raise KeyError(f"unknown keyframe ids: {missing}")
        for k, pose in corrections.items():
            self.keyframes[k].pose = pose

    # -- lifecycle ---------------------------------------------------------

    def freeze_and_reset(self, index: int, field_factory=None, frame_index: int = -1) -> int:
        """Archive the cube's trained field and install a fresh one."""
        if field_factory is None:
            field_factory = default_field_factory()
        ss = self.subspaces[index]
        self.archives.append(
            ArchivedMap(index, ss.field, tuple(ss.keyframe_ids), frame_index)
        )
        half = (ss.field.grid.domain_max - ss.field.grid.domain_min) / 2.0
        ss.field = field_factory(-half, half, index)
        return len(self.archives) - 1

    # -- queries -----------------------------------------------------------

    def active_subspace(self) -> Subspace:
        return self.subspaces[self.active_index]

    def subspaces_with_keyframes(self) -> list[Subspace]:
        return [s for s in self.subspaces if s.keyframe_ids]

    def sdf_global(self, points) -> np.ndarray:
        """Evaluate the stitched SDF: each point through its own cube's field.

        Points outside every cube get the nearest cube anyway (clamped by the
        field domain), keeping the function total.
        """
        from .field import sdf_only

        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(p))
        if self.single:
            return sdf_only(self.global_to_local(p, 0), self.subspaces[0].field)
        ijk = np.floor((p - self.origin) / self.edge).astype(int)
        ijk = np.clip(ijk, 0, np.array(self.lattice_shape) - 1)
        n = self.lattice_shape
        flat = (ijk[:, 0] * n[1] + ijk[:, 1]) * n[2] + ijk[:, 2]
        for idx in np.unique(flat):
            m = flat == idx
            out[m] = sdf_only(self.global_to_local(p[m], int(idx)), self.subspaces[idx].field)
        return out

    def make_eval(self):
        """Stitched render adapter: every point evaluates in its own cube."""
        from .field import forward_batch

        def fn(points):
            p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
            sdf = np.empty(len(p))
            rgb = np.zeros((len(p), 3))
            sem = np.zeros((len(p), 3))
            if self.single:
                out, _ = forward_batch(self.global_to_local(p, 0), self.subspaces[0].field)
                return out.sdf, out.rgb, out.semantic
            ijk = np.floor((p - self.origin) / self.edge).astype(int)
            ijk = np.clip(ijk, 0, np.array(self.lattice_shape) - 1)
            n = self.lattice_shape
            flat = (ijk[:, 0] * n[1] + ijk[:, 1]) * n[2] + ijk[:, 2]
            for idx in np.unique(flat):
                m = flat == idx
                out, _ = forward_batch(
                    self.global_to_local(p[m], int(idx)), self.subspaces[idx].field
                )
                sdf[m], rgb[m], sem[m] = out.sdf, out.rgb, out.semantic
            return sdf, rgb, sem

        return fn

    def mean_s(self) -> float:
        ss = self.subspaces_with_keyframes() or self.subspaces
        return float(np.mean([s.field.s for s in ss]))

    def export_state(self) -> dict:
        """JSON-ready structural snapshot (fields saved separately)."""
        return {
            "version": 1,
            "single": self.single,
            "edge": self.edge,
            "bounds_min": self.bounds_min.tolist(),
            "bounds_max": self.bounds_max.tolist(),
            "origin": self.origin.tolist(),
            "lattice_shape": list(self.lattice_shape),
            "active_index": self.active_index,
            "subspaces": [
                {
                    "index": s.index,
                    "center": s.center.tolist(),
                    "lattice": list(s.lattice),
                    "keyframe_ids": list(s.keyframe_ids),
                }
                for s in self.subspaces
            ],
            "keyframes": [
                {
                    "kf_id": k.kf_id,
                    "frame_index": k.frame_index,
                    "timestamp": k.timestamp,
                    "quat": k.pose.quat.tolist(),
                    "t": k.pose.t.tolist(),
                    "subspace_ids": sorted(k.subspace_ids),
                }
                for k in sorted(self.keyframes.values(), key=lambda k: k.kf_id)
            ],
            "archives": [
                {
                    "subspace_index": a.subspace_index,
                    "keyframe_ids": list(a.keyframe_ids),
                    "frozen_at_frame": a.frozen_at_frame,
                }
                for a in self.archives
            ],
        }

    @classmethod
    def restore(cls, state: dict, field_factory=None) -> "SubspaceAtlas":
        """Rebuild structure and keyframe poses from export_state() output.

        Keyframe images are not part of the state; restored keyframes carry
        empty rasters and support rendering / meshing / pose queries only.
        """
        atlas = cls(
            np.array(state["bounds_min"]),
            np.array(state["bounds_max"]),
            edge=state["edge"],
            field_factory=field_factory,
            single=state["single"],
        )
        if list(atlas.lattice_shape) != list(state["lattice_shape"]):
            raise ValueError("restored lattice does not match saved state")
        for e in state["keyframes"]:
            kf = Keyframe(
                e["kf_id"], e["frame_index"], e["timestamp"],
                Pose(np.array(e["quat"]), np.array(e["t"])),
                rgb=np.zeros((0, 0, 3)), depth=np.zeros((0, 0)),
                subspace_ids=set(e["subspace_ids"]),
            )
            atlas.keyframes[kf.kf_id] = kf
            atlas._next_id = max(atlas._next_id, kf.kf_id + 1)
        for se in state["subspaces"]:
            atlas.subspaces[se["index"]].keyframe_ids = list(se["keyframe_ids"])
        atlas.active_index = state["active_index"]
        return atlas
