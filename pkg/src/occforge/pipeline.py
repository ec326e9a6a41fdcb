"""Monocular (student) and privileged (teacher) occupancy branches.

Both branches share one layout of parameter names, so a teacher store can
drive the student code path and vice versa:

    backbone/conv{1,2,3}/{w,b}     strided 2D feature extractor
    queries/{embed,corrector/*}    depth-based voxel proposals
    dca/*, dsa/*, icca/*, cvt/*    attention blocks
    mask_token                     filler for voxels without visual evidence
    head3d/*, head2d/*             decoders
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import zoom

from .attention import (
    DeformAttnConfig, SinusoidalPE, cross_view_transform, deformable_self_attention,
    image_conditioned_cross_attention, temporal_aggregate,
)
from .autodiff import ops
from .autodiff.params import ParameterStore, ParamScope
from .autodiff.tensor import Tensor
from .geometry import CameraModel, VoxelGridSpec, unproject_depth, voxel_refpoints, voxelize
from .scenes import NUM_CLASSES, SyntheticScene, get_preset

STRIDE = 4
TOGGLES = ("aux", "icca", "distill", "cvt")


class DegenerateSceneError(ValueError):
    """No voxel survived query generation."""


@dataclass(frozen=True)
class BranchConfig:
    preset: str = "toy"
    width: int = 1
    frames: int = 1
    aux_loss: bool = False
    icca: bool = False
    distill: bool = False
    cvt: bool = False
    dim: int = 32
    heads: int = 2
    points: int = 4
    hidden: int = 8
    num_classes: int = NUM_CLASSES
    depth_noise: float = 0.1

    def __post_init__(self):
        get_preset(self.preset)
        if self.width < 1 or self.frames < 1:
            raise ValueError("width and frame count must be at least 1")
        if self.depth_noise < 0:
            raise ValueError("depth noise must be nonnegative")
        self.attention  # validates dim/heads/points

    @property
    def attention(self) -> DeformAttnConfig:
        return DeformAttnConfig(self.dim, self.heads, self.points)

    @property
    def toggles(self) -> tuple[str, ...]:
        on = {"aux": self.aux_loss, "icca": self.icca, "distill": self.distill, "cvt": self.cvt}
        return tuple(t for t in TOGGLES if on[t])

    def with_toggles(self, toggles) -> "BranchConfig":
        toggles = parse_toggles(toggles)
        return replace(self, aux_loss="aux" in toggles, icca="icca" in toggles,
                       distill="distill" in toggles, cvt="cvt" in toggles)

    @classmethod
    def student(cls, preset="toy", toggles=(), **kw) -> "BranchConfig":
        return cls(preset=preset, **kw).with_toggles(toggles)

    @classmethod
    def teacher(cls, preset="toy", toggles=("aux", "icca", "cvt"), width=2, frames=None,
                **kw) -> "BranchConfig":
        frames = get_preset(preset).frames if frames is None else frames
        cfg = cls(preset=preset, width=width, frames=frames, **kw).with_toggles(toggles)
        return replace(cfg, distill=False)


def parse_toggles(toggles) -> tuple[str, ...]:
    """Accept 'none', 'all', a comma list, or an iterable of toggle names."""
    if isinstance(toggles, str):
        text = toggles.strip().lower()
        if text in ("", "none"):
            return ()
        if text == "all":
            return ("aux", "icca", "distill")
        toggles = [t.strip() for t in text.split(",") if t.strip()]
    out = tuple(dict.fromkeys(toggles))
    bad = [t for t in out if t not in TOGGLES]
    if bad:
        raise ValueError(f"unknown toggles {bad}; valid: {TOGGLES}")
    return out


# ---------------------------------------------------------------- data types

@dataclass
class FeatureMap2D:
    tensor: Tensor
    frame: int = 0
    stride: int = STRIDE


@dataclass
class QuerySet:
    indices: np.ndarray
    features: Tensor
    keep_logits: Tensor | None = None

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class SemanticVoxelMap:
    logits: Tensor

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=-1)


@dataclass
class SemanticMap2D:
    logits: Tensor


@dataclass
class BranchOutput:
    features: list
    queries: QuerySet
    initial: Tensor
    refined: Tensor
    volume: Tensor
    semantic: SemanticVoxelMap
    semantic_2d: SemanticMap2D | None = None
    extras: dict = field(default_factory=dict)


def _scope(params) -> ParamScope:
    return params.scope("") if isinstance(params, ParameterStore) else params


# ---------------------------------------------------------------- stages

def extract_features(image, params, width: int = 1, dim: int = 32, hidden: int = 8,
                     frame: int = 0) -> FeatureMap2D:
    """Two stride-2 3x3 convolutions with ReLU, then a 1x1 projection to ``dim``."""
    params = _scope(params)
    image = image if isinstance(image, Tensor) else Tensor(image)
    c, H, W = image.shape
    if H % STRIDE or W % STRIDE:
        raise ValueError(f"image {H}x{W} not divisible by the backbone stride {STRIDE}")
    widths = [c, hidden * width, 2 * hidden * width]
    x = image
    for i in range(2):
        cin, cout = widths[i], widths[i + 1]
        w = params.param(f"conv{i + 1}/w", (cout, cin, 3, 3), fan_in=cin * 9)
        b = params.param(f"conv{i + 1}/b", (cout,), init="zeros")
        x = ops.relu(ops.conv(x, w, b, stride=2, padding=1))
    w = params.param("conv3/w", (dim, widths[2], 1, 1), fan_in=widths[2])
    b = params.param("conv3/b", (dim,), init="zeros")
    return FeatureMap2D(ops.conv(x, w, b), frame=frame)


def estimate_depth(depth, noise: float = 0.1, dropout: float = 0.05) -> np.ndarray:
    """Stand-in for a pretrained monocular depth network.

    Rendered depth is perturbed by a smooth multiplicative error field of
    log-std ``noise`` and a fraction ``dropout`` of pixels is lost. The
    perturbation is seeded by the depth content, so it is deterministic.
    """
    depth = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    if noise == 0 and dropout == 0:
        return depth
    rng = np.random.default_rng(zlib.crc32(depth.tobytes()))
    H, W = depth.shape
    coarse = rng.normal(size=(H // 8 + 2, W // 8 + 2))
    field = zoom(coarse, (H / coarse.shape[0], W / coarse.shape[1]), order=1)[:H, :W]
    out = depth * np.exp(noise * field)
    out[rng.uniform(size=depth.shape) < dropout] = 0.0
    return out


def _identity_kernel(shape):
    k = np.zeros(shape)
    k[(0, 0) + tuple(s // 2 for s in shape[2:])] = 1.0
    return k


def generate_depth_queries(depth, cam: CameraModel, spec: VoxelGridSpec, params,
                           dim: int = 32, corrector: bool = True) -> QuerySet:
    """Voxel proposals from a depth map, each carrying the shared query embedding.

    The corrector is a 3x3x3 convolution over the raw occupancy whose
    initial kernel is a centred delta with bias -0.5, so at initialization
    it keeps exactly the voxelized depth points.
    """
    params = _scope(params)
    occ, _ = voxelize(unproject_depth(depth, cam), spec)
    logits = None
    if corrector:
        w = params.param("corrector/w", (1, 1, 3, 3, 3), init=_identity_kernel)
        b = params.param("corrector/b", (1,), init="constant", value=-0.5)
        logits = ops.conv(Tensor(occ[None].astype(np.float64)), w, b, padding=1)
        occ = logits.data[0] > 0.0
    indices = np.argwhere(occ)
    if len(indices) == 0:
        raise DegenerateSceneError("depth map yields no occupied voxels")
    embed = params.param("embed", (dim,), init="normal", value=1.0)
    features = ops.broadcast_to(embed.reshape(1, dim), (len(indices), dim))
    return QuerySet(indices, features, logits)


def fill_mask_tokens(visible: Tensor, indices, token: Tensor, dims) -> Tensor:
    """[X, Y, Z, d] volume: visible rows at their voxels, ``token`` everywhere else."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    dims = tuple(int(n) for n in dims)
    if len(indices) == 0:
        raise ValueError("at least one visible voxel is required")
    if len(indices) != visible.shape[0]:
        raise ValueError("one feature row per visible voxel is required")
    if ((indices < 0) | (indices >= np.asarray(dims))).any():
        raise IndexError("visible voxel index out of bounds")
    lin = np.ravel_multi_index(tuple(indices.T), dims)
    if np.unique(lin).size != lin.size:
        raise ValueError("duplicate visible voxel indices")
    d = token.shape[-1]
    base = ops.broadcast_to(token.reshape(1, d), (int(np.prod(dims)), d))
    return ops.scatter_rows(base, lin, visible).reshape(dims + (d,))


def decode_semantic_voxels(volume: Tensor, params, factor: int = 1,
                           num_classes: int = NUM_CLASSES) -> SemanticVoxelMap:
    """Nearest-neighbour upsampling then a per-voxel linear map d -> C.

    The linear map runs at feature scale before replication; both orders
    give the same values and this one replicates them exactly.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("upsampling factor must be a positive integer")
    params = _scope(params)
    d = volume.shape[-1]
    w = params.param("w", (d, num_classes), fan_in=d)
    b = params.param("b", (num_classes,), init="zeros")
    logits = volume @ w + b
    if factor > 1:
        logits = ops.upsample_nearest(logits, int(factor), (0, 1, 2))
    return SemanticVoxelMap(logits)


def decode_semantics_2d(fmap, params, num_classes: int = NUM_CLASSES) -> SemanticMap2D:
    params = _scope(params)
    x = fmap.tensor if isinstance(fmap, FeatureMap2D) else fmap
    d = x.shape[0]
    for i in range(2):
        w = params.param(f"conv{i + 1}/w", (d, d, 3, 3), fan_in=d * 9)
        b = params.param(f"conv{i + 1}/b", (d,), init="zeros")
        x = ops.relu(ops.conv(x, w, b, padding=1))
    w = params.param("cls/w", (num_classes, d, 1, 1), fan_in=d)
    b = params.param("cls/b", (num_classes,), init="zeros")
    return SemanticMap2D(ops.conv(x, w, b))


# ---------------------------------------------------------------- branches

def _complete(p: ParamScope, cfg: BranchConfig, queries: QuerySet, visible: Tensor,
              fmap_t: Tensor, cam_t: CameraModel, pe: np.ndarray, features: list) -> BranchOutput:
    preset = get_preset(cfg.preset)
    fspec = preset.feature_spec
    token = p.param("mask_token", (cfg.dim,), init="normal", value=1.0)
    initial = fill_mask_tokens(visible, queries.indices, token, fspec.dims) + pe
    refined = deformable_self_attention(initial, p.scope("dsa"), cfg.attention)
    volume = refined
    if cfg.icca:
        volume = image_conditioned_cross_attention(refined, fmap_t, fspec, cam_t,
                                                   p.scope("icca"), cfg.attention)
    semantic = decode_semantic_voxels(volume, p.scope("head3d"), preset.feature_factor,
                                      cfg.num_classes)
    sem2d = None
    if cfg.aux_loss:
        sem2d = decode_semantics_2d(fmap_t, p.scope("head2d"), cfg.num_classes)
    return BranchOutput(features, queries, initial, refined, volume, semantic, sem2d)


def _check_scene(scene: SyntheticScene, cfg: BranchConfig) -> None:
    preset = get_preset(cfg.preset)
    if scene.spec != preset.spec:
        raise ValueError(f"scene grid {scene.spec.dims} does not match preset {cfg.preset!r}")


def run_student(scene: SyntheticScene, params, cfg: BranchConfig) -> BranchOutput:
    """Monocular branch on the scene's last frame."""
    if cfg.frames != 1:
        raise ValueError("the monocular branch takes exactly one frame")
    _check_scene(scene, cfg)
    p = _scope(params)
    fspec = get_preset(cfg.preset).feature_spec
    cam = scene.cameras[-1]
    fmap = extract_features(scene.images[-1], p.scope("backbone"), cfg.width, cfg.dim,
                            cfg.hidden, frame=scene.num_frames - 1).tensor
    depth = estimate_depth(scene.depths[-1], cfg.depth_noise, 0.05 if cfg.depth_noise else 0.0)
    queries = generate_depth_queries(depth, cam, fspec, p.scope("queries"), cfg.dim)
    pe = SinusoidalPE(cfg.dim).volume(fspec.dims)
    ref, valid = voxel_refpoints(fspec, queries.indices, cam)
    pos = pe[tuple(queries.indices.T)]
    visible = temporal_aggregate(queries.features, [ref], [valid], [fmap], p.scope("dca"),
                                 cfg.attention, pos)
    return _complete(p, cfg, queries, visible, fmap, cam, pe, [fmap])


def run_teacher(scene: SyntheticScene, params, cfg: BranchConfig) -> BranchOutput:
    """Privileged branch: wide backbone over the last ``cfg.frames`` frames."""
    if cfg.frames < 2:
        raise ValueError("the privileged branch needs at least two frames")
    if scene.num_frames < cfg.frames or any(c is None for c in scene.cameras[-cfg.frames:]):
        raise ValueError(f"scene provides {scene.num_frames} posed frames, "
                         f"teacher needs {cfg.frames}")
    _check_scene(scene, cfg)
    p = _scope(params)
    fspec = get_preset(cfg.preset).feature_spec
    first = scene.num_frames - cfg.frames
    cams = scene.cameras[first:]
    fmaps = [extract_features(img, p.scope("backbone"), cfg.width, cfg.dim, cfg.hidden,
                              frame=first + i).tensor
             for i, img in enumerate(scene.images[first:])]
    if cfg.cvt:
        fmaps = cross_view_transform(fmaps, SinusoidalPE(cfg.dim), p.scope("cvt"),
                                     residual_pe=False)
    depth = estimate_depth(scene.depths[-1], cfg.depth_noise, 0.05 if cfg.depth_noise else 0.0)
    queries = generate_depth_queries(depth, cams[-1], fspec, p.scope("queries"), cfg.dim)
    pe = SinusoidalPE(cfg.dim).volume(fspec.dims)
    refs, valids = zip(*(voxel_refpoints(fspec, queries.indices, c) for c in cams))
    pos = pe[tuple(queries.indices.T)]
    visible = temporal_aggregate(queries.features, list(refs), list(valids), fmaps,
                                 p.scope("dca"), cfg.attention, pos)
    return _complete(p, cfg, queries, visible, fmaps[-1], cams[-1], pe, fmaps)


def run_branch(scene: SyntheticScene, params, cfg: BranchConfig) -> BranchOutput:
    return run_student(scene, params, cfg) if cfg.frames == 1 else run_teacher(scene, params, cfg)
