"""Procedural street-like scenes, ray-marched depth and the scene file format.

Scene file layout ("OCSN", little-endian)::

    b"OCSN" | u32 version
    | SVOX grid block (see occforge.formats)
    | u32 frame count
    | per frame: u32 H | u32 W | f64 K[9] | f64 E[16] | f64 image[3*H*W] | f64 depth[H*W]
    | u32 point count | f64 xyz[3*n] | u8 labels[n]

Arrays are stored in C order. Frame t is the last frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import (
    BadMagicError, FormatError, Reader, UnsupportedVersionError, dumps_grid, read_grid_block,
)
from .geometry import CameraModel, PointCloud, VoxelGridSpec, project_points, unproject_depth

FREE, ROAD, BUILDING, CAR, PERSON, POLE, VEGETATION, RARE_VEHICLE = range(8)
CLASS_NAMES = ("free", "road", "building", "car", "person", "pole", "vegetation",
               "rare-vehicle")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE = 255

PALETTE = np.array([
    [0.55, 0.75, 0.95],  # free voxels never render; this doubles as the sky colour
    [0.35, 0.35, 0.38],
    [0.80, 0.45, 0.30],
    [0.15, 0.30, 0.85],
    [0.90, 0.15, 0.20],
    [0.95, 0.85, 0.20],
    [0.20, 0.65, 0.20],
    [0.60, 0.20, 0.75],
])


@dataclass(frozen=True)
class Preset:
    name: str
    spec: VoxelGridSpec
    image_size: tuple[int, int]
    focal: float
    feature_factor: int
    frames: int
    camera_height: float
    pitch: float

    @property
    def feature_spec(self) -> VoxelGridSpec:
        return self.spec.coarsen(self.feature_factor)


PRESETS = {
    "micro": Preset("micro", VoxelGridSpec.micro(), (16, 24), 12.0, 1, 2, 0.4, 0.15),
    "toy": Preset("toy", VoxelGridSpec.toy(), (48, 64), 30.0, 2, 3, 0.6, 0.15),
    "kitti": Preset("kitti", VoxelGridSpec.kitti(), (96, 320), 150.0, 2, 3, -0.3, 0.05),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(eq=False)
class SyntheticScene:
    spec: VoxelGridSpec
    labels: np.ndarray
    cameras: list
    images: list
    depths: list
    cloud: PointCloud
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.cameras)

    @property
    def preset(self) -> Preset | None:
        for p in PRESETS.values():
            if p.spec == self.spec and p.image_size == tuple(self.images[-1].shape[1:]):
                return p
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return dumps_scene(self) == dumps_scene(other)


# ---------------------------------------------------------------- ray marching

def _rays(cam: CameraModel):
    """World-space origin and per-pixel directions scaled so t is camera z."""
    H, W = cam.image_size
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                       indexing="ij")
    dc = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    dirs = dc.reshape(-1, 3) @ cam.rotation
    return cam.center, dirs


@dataclass
class RayHits:
    depth: np.ndarray   # [H, W] camera z of the hit segment midpoint, 0 on a miss
    label: np.ndarray   # [H, W] class of the hit voxel, 0 on a miss
    voxel: np.ndarray   # [H, W, 3] hit voxel index, -1 on a miss
    axis: np.ndarray    # [H, W] axis of the face the ray entered through, -1 on a miss


def march(labels: np.ndarray, spec: VoxelGridSpec, cam: CameraModel):
    """DDA traversal of every pixel ray.

    Returns (depth [H,W], hit label [H,W]). Depth is the camera z of the
    midpoint of the ray's segment through the first occupied voxel, so
    lifting it back lands inside that voxel; 0 (label 0) where nothing is hit.
    """
    hits = trace(labels, spec, cam)
    return hits.depth, hits.label


def trace(labels: np.ndarray, spec: VoxelGridSpec, cam: CameraModel) -> RayHits:
    """Like :func:`march`, also reporting which voxel and face each ray hit."""
    labels = np.asarray(labels)
    occupied = (labels != FREE) & (labels != IGNORE)
    H, W = cam.image_size
    origin, dirs = _rays(cam)
    n = len(dirs)
    lo, hi = np.asarray(spec.origin), spec.upper
    dims = np.asarray(spec.dims)
    res = spec.resolution

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    tmin = np.where(dirs == 0, -np.inf, np.minimum(ta, tb))
    tmax = np.where(dirs == 0, np.inf, np.maximum(ta, tb))
    inside_slab = (dirs != 0) | ((origin >= lo) & (origin < hi))
    t0 = np.maximum(tmin.max(axis=1), 0.0)
    t1 = tmax.min(axis=1)
    alive = inside_slab.all(axis=1) & (t0 < t1)

    depth = np.zeros(n)
    hit = np.zeros(n, dtype=np.int64)
    voxel = np.full((n, 3), -1, dtype=np.int64)
    face = np.full(n, -1, dtype=np.int64)
    rays = np.nonzero(alive)[0]
    d = dirs[rays]
    t_enter = t0[rays]
    entry = tmin[rays].argmax(axis=1)
    start = origin + t_enter[:, None] * d
    idx = np.clip(np.floor((start - lo) / res).astype(np.int64), 0, dims - 1)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = lo + (idx + (d > 0)) * res
        t_next = np.where(d != 0, (bound - origin) / d, np.inf)
        t_delta = np.where(d != 0, res / np.abs(d), np.inf)

    while len(rays):
        occ = occupied[idx[:, 0], idx[:, 1], idx[:, 2]]
        if occ.any():
            t_exit = t_next[occ].min(axis=1)
            depth[rays[occ]] = 0.5 * (t_enter[occ] + t_exit)
            hit[rays[occ]] = labels[idx[occ, 0], idx[occ, 1], idx[occ, 2]]
            voxel[rays[occ]] = idx[occ]
            face[rays[occ]] = entry[occ]
        go = ~occ
        rays, d, idx, step = rays[go], d[go], idx[go], step[go]
        t_next, t_delta = t_next[go], t_delta[go]
        entry = t_next.argmin(axis=1)
        r = np.arange(len(rays))
        t_enter = t_next[r, entry]
        idx[r, entry] += step[r, entry]
        t_next[r, entry] += t_delta[r, entry]
        keep = ((idx >= 0) & (idx < dims)).all(axis=1)
        rays, d, idx, step = rays[keep], d[keep], idx[keep], step[keep]
        t_next, t_delta, t_enter = t_next[keep], t_delta[keep], t_enter[keep]
        entry = entry[keep]
    return RayHits(depth.reshape(H, W), hit.reshape(H, W), voxel.reshape(H, W, 3),
                   face.reshape(H, W))


def render_depth(labels: np.ndarray, spec: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    return march(labels, spec, cam)[0]


def project_labels_to_image(cloud: PointCloud, cam: CameraModel,
                            image_size=None) -> np.ndarray:
    """Sparse per-pixel labels by z-buffered point projection; IGNORE elsewhere."""
    if image_size is not None and tuple(image_size) != tuple(cam.image_size):
        raise ValueError(f"camera renders {cam.image_size}, asked for {tuple(image_size)}")
    H, W = cam.image_size
    out = np.full((H, W), IGNORE, dtype=np.int64)
    if len(cloud) == 0:
        return out
    if cloud.labels is None:
        raise ValueError("point cloud carries no labels")
    proj = project_points(cloud.points, cam)
    keep = np.nonzero(proj.valid)[0]
    px = np.rint(proj.uv[keep]).astype(np.int64)
    pix = px[:, 1] * W + px[:, 0]
    # nearest first, ties to the earlier point
    order = np.lexsort((keep, proj.depth[keep], pix))
    pix = pix[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    out.reshape(-1)[pix[first]] = np.asarray(cloud.labels)[keep[order][first]]
    return out


# ---------------------------------------------------------------- generation

def _place(labels, block, lo, size, label):
    """Fill a box given in block units, clipped to the grid."""
    sl = tuple(slice(max(0, a * block), max(0, (a + s) * block)) for a, s in zip(lo, size))
    labels[sl] = label


def _trajectory(rng, preset: Preset, frames: int) -> list:
    H, W = preset.image_size
    spec = preset.spec
    base_x = spec.origin[0] + 0.1 * spec.resolution
    cams = []
    for k in reversed(range(frames)):
        pos = [base_x - 1.5 * spec.resolution * k, rng.uniform(-0.5, 0.5) * spec.resolution * k,
               preset.camera_height]
        yaw = rng.uniform(-0.05, 0.05) * (k > 0)
        cams.append(CameraModel.from_pose(pos, yaw, preset.pitch, preset.focal, preset.focal,
                                          (W - 1) / 2, (H - 1) / 2, (H, W)))
    return cams


def generate_labels(rng: np.random.Generator, preset: Preset, empty: bool = False) -> np.ndarray:
    """Ground plane, 1-3 buildings and 0-4 small objects, aligned to feature blocks."""
    b = preset.feature_factor
    BX, BY, BZ = (n // b for n in preset.spec.dims)
    labels = np.zeros(preset.spec.dims, dtype=np.uint8)
    _place(labels, b, (0, 0, 0), (BX, BY, 1), ROAD)
    if empty:
        return labels
    if rng.uniform() < 0.5:
        side = 0 if rng.uniform() < 0.5 else BY - max(1, BY // 8)
        _place(labels, b, (0, side, 1), (BX, max(1, BY // 8), 1), VEGETATION)
    for _ in range(rng.integers(1, 4)):
        length = rng.integers(max(1, BX // 6), max(2, BX // 2))
        depth = rng.integers(1, max(2, BY // 5))
        height = rng.integers(2, BZ + 1) if BZ > 2 else BZ
        x0 = rng.integers(BX // 4, max(BX // 4 + 1, BX - length))
        y0 = rng.choice([rng.integers(0, max(1, BY // 6)), BY - depth - rng.integers(0, max(1, BY // 6))])
        if rng.uniform() < 0.25:  # building closing off the far end
            x0, length = BX - depth, depth
            y0, depth = rng.integers(0, BY // 2), rng.integers(BY // 4, BY // 2 + 1)
        _place(labels, b, (x0, y0, 1), (length, depth, height - 1), BUILDING)
    kinds = [(CAR, (2, 1, 1), 0.45), (PERSON, (1, 1, 1), 0.25), (POLE, (1, 1, 2), 0.22),
             (RARE_VEHICLE, (3, 2, 1), 0.06)]
    probs = np.array([k[2] for k in kinds])
    for _ in range(rng.integers(0, 5)):
        label, size, _ = kinds[rng.choice(len(kinds), p=probs / probs.sum())]
        size = tuple(min(s, n - 1) for s, n in zip(size, (BX, BY, BZ)))
        x0 = rng.integers(max(1, BX // 5), max(2, BX - size[0]))
        y0 = rng.integers(BY // 4, max(BY // 4 + 1, 3 * BY // 4 - size[1] + 1))
        _place(labels, b, (x0, y0, 1), size, label)
    if rng.uniform() < 0.5:
        s = max(1, BX // 10)
        _place(labels, b, (rng.integers(BX // 3, BX - s), rng.integers(0, BY - s), 1),
               (s, s, min(2, BZ - 1)), VEGETATION)
    return labels


@dataclass
class Lighting:
    """Per-scene appearance: voxel albedo texture, sun direction, exposure and fog.

    Shading makes class identity depend on more than raw pixel colour, so a
    feature extractor has to learn it.
    """
    texture: np.ndarray  # [X, Y, Z, 3] multiplicative albedo jitter
    sun: np.ndarray      # unit vector
    gain: float
    fog: float           # metres at which 1/e of the surface colour survives
    ambient: float = 0.35

    @classmethod
    def sample(cls, rng: np.random.Generator, spec: VoxelGridSpec,
               texture: float = 0.25) -> "Lighting":
        sun = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.3, 1.0)])
        extent = spec.resolution * max(spec.dims)
        return cls(rng.normal(0.0, texture, size=tuple(spec.dims) + (3,)),
                   sun / np.linalg.norm(sun), rng.uniform(0.6, 1.2),
                   extent * rng.uniform(0.8, 2.0))

    def shade(self, hits: RayHits) -> np.ndarray:
        """[3, H, W] image of ``hits``; misses show the sky."""
        miss = hits.label == FREE
        vox = np.where(miss[..., None], 0, hits.voxel)
        albedo = PALETTE[hits.label] * (1.0 + self.texture[vox[..., 0], vox[..., 1], vox[..., 2]])
        facing = np.abs(self.sun[np.where(miss, 0, hits.axis)])
        lit = albedo * (self.ambient + (1.0 - self.ambient) * facing)[..., None]
        keep = np.exp(-hits.depth / self.fog)[..., None]
        img = np.where(miss[..., None], PALETTE[FREE], keep * lit + (1.0 - keep) * PALETTE[FREE])
        return (self.gain * img).transpose(2, 0, 1)


def generate_scene(seed: int, preset="toy", frames: int | None = None,
                   empty: bool = False, noise: float = 0.03,
                   depth_sigma: float = 0.0) -> SyntheticScene:
    """Deterministic scene for ``seed``; ``empty`` keeps only the ground plane.

    ``noise`` is the per-pixel image noise. ``depth_sigma`` adds zero-mean
    Gaussian noise (metres) to every observed depth pixel, from a separate
    stream so the rest of the scene does not change.
    """
    if depth_sigma < 0:
        raise ValueError("depth_sigma must be nonnegative")
    preset = get_preset(preset) if isinstance(preset, str) else preset
    frames = preset.frames if frames is None else int(frames)
    if frames < 1:
        raise ValueError("a scene needs at least one frame")
    rng = np.random.default_rng(seed)
    labels = generate_labels(rng, preset, empty)
    cams = _trajectory(rng, preset, frames)
    light = Lighting.sample(rng, preset.spec)
    images, depths, hits = [], [], []
    for cam in cams:
        h = trace(labels, preset.spec, cam)
        images.append(light.shade(h) + rng.normal(0.0, noise, size=(3,) + h.depth.shape))
        depths.append(h.depth)
        hits.append(h.label)
    cloud = unproject_depth(depths[-1], cams[-1], stride=2, labels=hits[-1])
    if depth_sigma > 0:
        drng = np.random.default_rng([seed, 1])
        depths = [np.where(d > 0, np.maximum(d + drng.normal(0.0, depth_sigma, d.shape), 1e-3), 0.0)
                  for d in depths]
    cloud = PointCloud(cloud.points, cloud.labels.astype(np.uint8))
    return SyntheticScene(preset.spec, labels, cams, images, depths, cloud,
                          {"seed": int(seed), "preset": preset.name})


def frustum_mask(spec: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    """Voxels whose centroid projects into the camera image."""
    return project_points(spec.centroids(spec.all_indices()), cam).valid.reshape(spec.dims)


def target_labels(scene: SyntheticScene) -> np.ndarray:
    """Evaluation/training targets: ground truth inside the frame-t frustum, IGNORE outside."""
    out = scene.labels.astype(np.int64)
    out[~frustum_mask(scene.spec, scene.cameras[-1])] = IGNORE
    return out


# ---------------------------------------------------------------- file format

SCENE_MAGIC = b"OCSN"
SCENE_VERSION = 1


def dumps_scene(scene: SyntheticScene) -> bytes:
    parts = [SCENE_MAGIC, struct.pack("<I", SCENE_VERSION),
             dumps_grid(scene.labels, scene.spec.resolution, scene.spec.origin),
             struct.pack("<I", scene.num_frames)]
    for cam, img, depth in zip(scene.cameras, scene.images, scene.depths):
        H, W = depth.shape
        if img.shape != (3, H, W) or tuple(cam.image_size) != (H, W):
            raise ValueError("frame arrays disagree with the camera image size")
        parts.append(struct.pack("<II", H, W))
        parts.append(np.ascontiguousarray(cam.intrinsics, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(cam.extrinsics, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(img, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(depth, dtype="<f8").tobytes())
    pts = np.asarray(scene.cloud.points, dtype="<f8").reshape(-1, 3)
    labels = scene.cloud.labels if scene.cloud.labels is not None else np.zeros(len(pts))
    parts.append(struct.pack("<I", len(pts)))
    parts.append(np.ascontiguousarray(pts).tobytes())
    parts.append(np.asarray(labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def loads_scene(blob: bytes) -> SyntheticScene:
    r = Reader(blob)
    if r.take(4) != SCENE_MAGIC:
        raise BadMagicError("not a scene file")
    version = r.u32()
    if version != SCENE_VERSION:
        raise UnsupportedVersionError(f"scene version {version}")
    labels, resolution, origin = read_grid_block(r)
    spec = VoxelGridSpec(origin, resolution, labels.shape)
    cams, images, depths = [], [], []
    for _ in range(r.u32()):
        H, W = r.unpack("<II")
        K = r.f64_array(9).reshape(3, 3)
        E = r.f64_array(16).reshape(4, 4)
        cams.append(CameraModel(K, E, (H, W)))
        images.append(r.f64_array(3 * H * W).reshape(3, H, W))
        depths.append(r.f64_array(H * W).reshape(H, W))
    n = r.u32()
    pts = r.f64_array(3 * n).reshape(n, 3)
    cloud = PointCloud(pts, r.u8_array(n))
    if not r.at_end():
        raise FormatError("trailing bytes after scene payload")
    scene = SyntheticScene(spec, labels, cams, images, depths, cloud)
    if scene.preset is not None:
        scene.meta["preset"] = scene.preset.name
    return scene


def write_scene(path, scene: SyntheticScene) -> None:
    Path(path).write_bytes(dumps_scene(scene))


def read_scene(path) -> SyntheticScene:
    return loads_scene(Path(path).read_bytes())
