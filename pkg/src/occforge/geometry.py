"""Pinhole cameras, voxel grids, and the projections between them.

World frame: x forward, y left, z up (meters). Camera frame: x right,
y down, z along the optical axis. Extrinsics map world to camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        E = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        R = E[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def simple(cls, fx, fy, cx, cy, image_size, extrinsics=None) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(4) if extrinsics is None else extrinsics, image_size)

    @classmethod
    def from_pose(cls, position, yaw: float, pitch: float, fx: float, fy: float,
                  cx: float, cy: float, image_size) -> "CameraModel":
        """Camera at ``position`` looking along heading ``yaw`` (about +z),
        tilted down by ``pitch`` radians."""
        f = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
        r = np.cross(f, [0.0, 0.0, 1.0])
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = np.stack([r, d, f])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
        return cls.simple(fx, fy, cx, cy, image_size, E)

    def scaled(self, factor: int) -> "CameraModel":
        """The same camera viewing an image downsampled by ``factor``.

        Normalized image coordinates are preserved, so the principal point
        maps to pixel units of the smaller (H/factor, W/factor) grid.
        """
        H, W = self.image_size
        h, w = H // factor, W // factor
        sx = (w - 1) / (W - 1) if W > 1 else 1.0
        sy = (h - 1) / (H - 1) if H > 1 else 1.0
        K = np.array([[self.fx * sx, 0.0, self.cx * sx],
                      [0.0, self.fy * sy, self.cy * sy],
                      [0.0, 0.0, 1.0]])
        return CameraModel(K, self.extrinsics, (h, w))


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    resolution: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive counts")

    @classmethod
    def kitti(cls) -> "VoxelGridSpec":
        """SemanticKITTI geometry: [0, 51.2] x [-25.6, 25.6] x [-2, 4.4] m at 0.2 m."""
        return cls((0.0, -25.6, -2.0), 0.2, (256, 256, 32))

    @classmethod
    def toy(cls) -> "VoxelGridSpec":
        return cls((0.0, -6.4, -1.2), 0.4, (32, 32, 8))

    @classmethod
    def micro(cls) -> "VoxelGridSpec":
        return cls((0.0, -2.0, -1.0), 0.5, (8, 8, 4))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * self.resolution

    def coarsen(self, factor: int) -> "VoxelGridSpec":
        if any(d % factor for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return VoxelGridSpec(self.origin, self.resolution * factor,
                             tuple(d // factor for d in self.dims))

    def index_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Voxel indices of ``points`` [P,3] and a mask of in-grid points."""
        rel = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.resolution
        idx = np.floor(rel).astype(np.int64)
        inside = ((idx >= 0) & (idx < np.asarray(self.dims))).all(axis=-1)
        return idx, inside

    def centroids(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        return np.asarray(self.origin) + (indices + 0.5) * self.resolution

    def all_indices(self) -> np.ndarray:
        """Every voxel index in row-major (x slowest) order, [N,3]."""
        return np.stack(np.unravel_index(np.arange(self.num_voxels), self.dims), axis=1)

    def linear(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        return np.ravel_multi_index(tuple(indices.T), self.dims)


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels must align 1:1 with points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Projection:
    """Per-point projection results; ``normalized`` is (u/(W-1), v/(H-1))."""
    uv: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    normalized: np.ndarray = field(repr=False)


def _affine(M: np.ndarray, pts: np.ndarray, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    # elementwise sums in a fixed order (no BLAS) so scalar oracles can match bitwise
    cols = [M[i, 0] * pts[:, 0] + M[i, 1] * pts[:, 1] + M[i, 2] * pts[:, 2] + offset[i]
            for i in range(3)]
    return np.stack(cols, axis=1)


def world_to_camera(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    return _affine(cam.rotation, np.asarray(points, dtype=np.float64).reshape(-1, 3),
                   cam.translation)


def unproject_depth(depth, cam: CameraModel, stride: int = 1, labels=None) -> PointCloud:
    """Lift every ``stride``-th pixel with positive depth to world space.

    ``labels`` optionally gives a per-pixel class map carried onto the points.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    if (depth < 0).any():
        raise ValueError("depth must be nonnegative")
    vs, us = np.meshgrid(np.arange(0, depth.shape[0], stride),
                         np.arange(0, depth.shape[1], stride), indexing="ij")
    z = depth[vs, us]
    keep = z > 0
    u, v, z = us[keep].astype(np.float64), vs[keep].astype(np.float64), z[keep]
    pc = np.stack([z * (u - cam.cx) / cam.fx, z * (v - cam.cy) / cam.fy, z], axis=1)
    world = _affine(cam.rotation.T, pc - cam.translation)
    lab = None if labels is None else np.asarray(labels)[vs, us][keep]
    return PointCloud(world, lab)


def project_points(points, cam: CameraModel) -> Projection:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    pc = world_to_camera(pts.reshape(-1, 3), cam)
    uvw = _affine(cam.intrinsics, pc)
    z = pc[:, 2]
    front = z > 0
    safe = np.where(front, uvw[:, 2], 1.0)
    u = uvw[:, 0] / safe
    v = uvw[:, 1] / safe
    H, W = cam.image_size
    valid = front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    norm = np.stack([u / max(W - 1, 1), v / max(H - 1, 1)], axis=1)
    return Projection(np.stack([u, v], axis=1), z, valid, norm)


def voxelize(points, spec: VoxelGridSpec, num_classes: int | None = None,
             fill_label: int = 255):
    """Occupancy of ``spec`` from a point cloud, plus a majority-label grid.

    The label grid is None when the cloud carries no labels. Ties in the
    majority vote go to the lowest class id; empty voxels get ``fill_label``.
    """
    cloud = points if isinstance(points, PointCloud) else PointCloud(points)
    idx, inside = spec.index_of(cloud.points)
    occ = np.zeros(spec.dims, dtype=bool)
    occ[tuple(idx[inside].T)] = True
    if cloud.labels is None:
        return occ, None
    labels = np.full(spec.dims, fill_label, dtype=np.int64)
    lin = spec.linear(idx[inside])
    lab = cloud.labels[inside]
    if lin.size:
        pairs, counts = np.unique(np.stack([lin, lab], axis=1), axis=0, return_counts=True)
        order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
        pairs = pairs[order]
        first = np.ones(len(pairs), dtype=bool)
        first[1:] = pairs[1:, 0] != pairs[:-1, 0]
        labels.reshape(-1)[pairs[first, 0]] = pairs[first, 1]
    return occ, labels


def voxel_refpoints(spec: VoxelGridSpec, indices, cam: CameraModel):
    """Normalized image reference points of voxel centroids and their validity."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if ((indices < 0) | (indices >= np.asarray(spec.dims))).any():
        raise IndexError("voxel index out of bounds")
    proj = project_points(spec.centroids(indices), cam)
    return proj.normalized, proj.valid
