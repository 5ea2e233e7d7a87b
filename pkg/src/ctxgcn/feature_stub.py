"""Synthetic clip features, box projection, RoI pooling and the backbone-tail stand-in.

The real 3D backbone is out of scope; everything downstream starts from
clip-level feature volumes. The synthetic generator plants a
class-coding context blob away from the actor box so that actor features
alone carry no label information while context does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor_math import Parameter, relu
from .tubes import Box, GroundTruthInstance, Tube

ROI_BINS = 7
TEMPORAL_STRIDE = 8  # input frames per feature-map temporal slice


@dataclass(frozen=True)
class ClipGeometry:
    frames: int = 32
    height: int = 224
    width: int = 224
    spatial_stride: int = 16
    box_stride: int = 4  # frame sampling stride for tube boxes

    def __post_init__(self):
        if self.frames % TEMPORAL_STRIDE != 0:
            raise ValidationError(f"frames {self.frames} not divisible by 8")
        if self.height % self.spatial_stride or self.width % self.spatial_stride:
            raise ValidationError("height/width not divisible by spatial stride")

    @property
    def t_out(self) -> int:
        return self.frames // TEMPORAL_STRIDE

    @property
    def h_out(self) -> int:
        return self.height // self.spatial_stride

    @property
    def w_out(self) -> int:
        return self.width // self.spatial_stride


@dataclass
class FeatureMap:
    """Clip-level feature volume of shape (channels, T', H', W')."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4:
            raise DimensionError(f"feature map must be 4-D, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def num_cells(self) -> int:
        d, t, h, w = self.values.shape
        return t * h * w


@dataclass(frozen=True)
class ProjectedRegion:
    """Inclusive cell-coordinate rectangle plus a temporal slice index."""

    x1: int
    y1: int
    x2: int
    y2: int
    t_slice: int


def project_box(box: Box, frame_offset: int, geom: ClipGeometry) -> ProjectedRegion:
    """Map a pixel box and clip-relative frame onto feature-map coordinates."""
    if not 0 <= frame_offset < geom.frames:
        raise ValidationError(f"frame offset {frame_offset} outside clip")
    s = geom.spatial_stride
    x1 = max(0, min(geom.w_out - 1, math.floor(box.x1 / s)))
    y1 = max(0, min(geom.h_out - 1, math.floor(box.y1 / s)))
    x2 = max(0, min(geom.w_out - 1, math.ceil(box.x2 / s) - 1))
    y2 = max(0, min(geom.h_out - 1, math.ceil(box.y2 / s) - 1))
    if x2 < x1 or y2 < y1:
        raise ValidationError(f"box {box} projects to an empty region")
    t = max(0, min(geom.t_out - 1, frame_offset // TEMPORAL_STRIDE))
    return ProjectedRegion(x1, y1, x2, y2, t)


def roi_pool(fm: FeatureMap, region: ProjectedRegion) -> np.ndarray:
    """Max-pool the region into a (channels, T', 7, 7) grid, per temporal slice.

    Bin boundaries come from rounding equal fractions of the region
    extent; a bin that rounds to zero width/height takes its nearest
    single cell.
    """

    def bin_edges(lo: int, hi: int) -> list[tuple[int, int]]:
        n = hi - lo + 1
        edges = []
        for i in range(ROI_BINS):
            a = lo + round(i * n / ROI_BINS)
            b = lo + round((i + 1) * n / ROI_BINS) - 1
            if b < a:
                a = b = max(lo, min(hi, a))
            edges.append((a, b))
        return edges

    xs = bin_edges(region.x1, region.x2)
    ys = bin_edges(region.y1, region.y2)
    d, t = fm.values.shape[0], fm.values.shape[1]
    out = np.empty((d, t, ROI_BINS, ROI_BINS), dtype=fm.values.dtype)
    for iy, (ya, yb) in enumerate(ys):
        for ix, (xa, xb) in enumerate(xs):
            patch = fm.values[:, :, ya : yb + 1, xa : xb + 1]
            out[:, :, iy, ix] = patch.max(axis=(2, 3))
    return out


@dataclass
class TailParams:
    """Affine D' -> D'' stand-in for the backbone tail (frozen during training)."""

    weight: Parameter  # (D', D'')
    bias: Parameter  # (D'',)


def tail_stub(pooled: np.ndarray, params: TailParams) -> np.ndarray:
    """Spatiotemporal average pool, then learned affine + ReLU to actor features."""
    if pooled.ndim != 4 or pooled.shape[0] != params.weight.value.shape[0]:
        raise DimensionError(
            f"pooled shape {pooled.shape} incompatible with tail "
            f"weight {params.weight.value.shape}"
        )
    v = pooled.mean(axis=(1, 2, 3))
    return relu(v @ params.weight.value + params.bias.value)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

# channel layout of synthetic feature volumes:
#   0                      shared blob marker
#   1 .. num_classes       one-hot class signature of the blob
#   last ACTOR_CHANNELS    class-independent actor signature
ACTOR_CHANNELS = 4


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    train_videos_per_class: int = 12
    test_videos_per_class: int = 4
    video_frames: int = 48
    context_dim: int = 24
    actor_dim: int = 32
    noise_std: float = 0.25
    blob_amp: float = 4.0
    actor_amp: float = 2.0
    object_margin_px: int = 8
    geometry: ClipGeometry = field(
        default_factory=lambda: ClipGeometry(frames=32, height=112, width=112)
    )

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError("need at least one class")
        if self.context_dim < 1 + self.num_classes + ACTOR_CHANNELS:
            raise ValidationError(
                f"context_dim {self.context_dim} too small for "
                f"{self.num_classes} classes plus marker and actor channels"
            )
        if self.video_frames % TEMPORAL_STRIDE or self.video_frames < self.geometry.frames:
            raise ValidationError("video_frames must be a multiple of 8 and >= clip length")


@dataclass
class SynthVideo:
    video_id: str
    label: int
    num_frames: int
    volume: np.ndarray  # (D', num_frames/8, H', W')
    tubes: list[Tube]
    gt: GroundTruthInstance
    blob_cell: tuple[int, int]  # (row, col) on the feature grid


@dataclass
class SynthDataset:
    spec: SynthSpec
    seed: int
    train: list[SynthVideo]
    test: list[SynthVideo]

    @property
    def geometry(self) -> ClipGeometry:
        return self.spec.geometry


def valid_clip_starts(num_frames: int, geom: ClipGeometry) -> list[int]:
    """Window start frames, snapped to temporal-slice boundaries."""
    if num_frames < geom.frames:
        return [0]
    return list(range(0, num_frames - geom.frames + 1, TEMPORAL_STRIDE))


def clip_feature_map(video: SynthVideo, start: int, geom: ClipGeometry) -> FeatureMap:
    """Feature map of the 32-frame window at ``start`` (edge-repeated if short)."""
    if start % TEMPORAL_STRIDE != 0:
        raise ValidationError(f"clip start {start} not on a slice boundary")
    s0 = start // TEMPORAL_STRIDE
    n_slices = video.volume.shape[1]
    idx = [min(s0 + k, n_slices - 1) for k in range(geom.t_out)]
    return FeatureMap(video.volume[:, idx])


def _random_box(rng, geom: ClipGeometry, lo: int, hi: int) -> Box:
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    x1 = int(rng.integers(0, geom.width - w + 1))
    y1 = int(rng.integers(0, geom.height - h + 1))
    return Box(x1, y1, x1 + w, y1 + h)


def _jitter_box(rng, box: Box, geom: ClipGeometry, amount: int = 3) -> Box:
    dx = int(rng.integers(-amount, amount + 1))
    dy = int(rng.integers(-amount, amount + 1))
    x1 = min(max(box.x1 + dx, 0), geom.width - 1)
    y1 = min(max(box.y1 + dy, 0), geom.height - 1)
    return Box(x1, y1, min(box.x2 + dx, geom.width), min(box.y2 + dy, geom.height))


def _make_video(spec: SynthSpec, rng, video_id: str, label: int) -> SynthVideo:
    from .tubes import spatial_iou

    geom = spec.geometry
    n_slices = spec.video_frames // TEMPORAL_STRIDE
    actor_box = _random_box(rng, geom, 32, 48)
    proj = project_box(actor_box, 0, geom)

    # context blob on a grid cell strictly outside the actor region
    while True:
        by = int(rng.integers(0, geom.h_out))
        bx = int(rng.integers(0, geom.w_out))
        if not (proj.x1 <= bx <= proj.x2 and proj.y1 <= by <= proj.y2):
            break

    # distractor tube away from the actor
    while True:
        distractor = _random_box(rng, geom, 24, 40)
        if spatial_iou(distractor, actor_box) <= 0.3:
            break

    volume = rng.normal(0.0, spec.noise_std, (spec.context_dim, n_slices, geom.h_out, geom.w_out))
    volume[-ACTOR_CHANNELS:, :, proj.y1 : proj.y2 + 1, proj.x1 : proj.x2 + 1] += spec.actor_amp
    volume[0, :, by, bx] += spec.blob_amp
    volume[1 + label, :, by, bx] += spec.blob_amp

    box_frames = list(range(0, spec.video_frames - geom.box_stride + 1, geom.box_stride))
    tubes = [
        Tube(video_id, 0, {f: _jitter_box(rng, actor_box, geom) for f in box_frames}),
        Tube(video_id, 1, {f: _jitter_box(rng, distractor, geom) for f in box_frames}),
    ]

    n_key = int(rng.integers(3, 6))
    key_frames = sorted(rng.choice(box_frames, size=n_key, replace=False).tolist())
    s = geom.spatial_stride
    m = spec.object_margin_px
    blob_box = Box(
        max(0, bx * s - m),
        max(0, by * s - m),
        min(geom.width, (bx + 1) * s + m),
        min(geom.height, (by + 1) * s + m),
    )
    gt = GroundTruthInstance(
        video_id,
        instance_id=0,
        label=label,
        keyframes=[(f, actor_box) for f in key_frames],
        object_boxes={f: [blob_box] for f in key_frames},
    )
    return SynthVideo(video_id, label, spec.video_frames, volume, tubes, gt, (by, bx))


def synth_generate(spec: SynthSpec, seed: int) -> SynthDataset:
    """Deterministic synthetic dataset; the context blob determines the label."""
    rng = np.random.Generator(np.random.Philox(seed))
    train, test = [], []
    for split, per_class, out in (
        ("train", spec.train_videos_per_class, train),
        ("test", spec.test_videos_per_class, test),
    ):
        for c in range(spec.num_classes):
            for k in range(per_class):
                out.append(_make_video(spec, rng, f"{split}_c{c}_v{k:03d}", c))
    return SynthDataset(spec, seed, train, test)
