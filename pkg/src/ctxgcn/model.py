"""Clip-level model wrappers binding feature extraction to the two heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feature_stub import (
    ClipGeometry,
    FeatureMap,
    SynthVideo,
    TailParams,
    clip_feature_map,
    project_box,
    roi_pool,
    tail_stub,
)
from .gcn_head import (
    GraphHeadConfig,
    HeadParams,
    baseline_backward,
    baseline_forward,
    embed_actor_location,
    head_backward,
    head_forward,
)
from .tensor_math import Parameter
from .tubes import Box, Tube


def window_box(tube: Tube, geom: ClipGeometry, start: int) -> Box:
    """Time-averaged box of the tube over one clip window."""
    boxes = [b for f, b in tube.boxes.items() if start <= f < start + geom.frames]
    if not boxes:
        # tube absent from the window; fall back to its nearest stored box
        nearest = min(tube.boxes, key=lambda f: min(abs(f - start), abs(f - (start + geom.frames - 1))))
        boxes = [tube.boxes[nearest]]
    return Box(
        float(np.mean([b.x1 for b in boxes])),
        float(np.mean([b.y1 for b in boxes])),
        float(np.mean([b.x2 for b in boxes])),
        float(np.mean([b.y2 for b in boxes])),
    )


@dataclass
class ClipInputs:
    fm: FeatureMap
    actor_feats: np.ndarray  # (N, D'')
    actor_locs: np.ndarray  # (N, 4)
    tube_ids: list[int]


def build_clip_inputs(
    video: SynthVideo, start: int, geom: ClipGeometry, tail: TailParams
) -> ClipInputs:
    fm = clip_feature_map(video, start, geom)
    feats, locs, ids = [], [], []
    for tube in video.tubes:
        box = window_box(tube, geom, start)
        region = project_box(box, 0, geom)
        feats.append(tail_stub(roi_pool(fm, region), tail))
        try:
            locs.append(embed_actor_location(tube, geom, start))
        except Exception:
            # tube without boxes in the window: embed its nearest box
            stub = Tube(tube.video_id, tube.tube_id, {start: box})
            locs.append(embed_actor_location(stub, geom, start))
        ids.append(tube.tube_id)
    return ClipInputs(fm, np.stack(feats), np.stack(locs), ids)


@dataclass
class GCNModel:
    config: GraphHeadConfig
    params: HeadParams
    tail: TailParams  # frozen: not part of the trainable set
    geometry: ClipGeometry
    dropout_p: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False)

    def clip_inputs(self, video: SynthVideo, start: int) -> ClipInputs:
        key = (video.video_id, start)
        if key not in self._cache:
            self._cache[key] = build_clip_inputs(video, start, self.geometry, self.tail)
        return self._cache[key]

    def forward_clip(self, video: SynthVideo, start: int, training: bool = False,
                     rng: np.random.Generator | None = None):
        ci = self.clip_inputs(video, start)
        logits, adjacencies, cache = head_forward(
            ci.actor_feats, ci.fm, self.config, self.params,
            actor_locs=ci.actor_locs, training=training,
            dropout_p=self.dropout_p, rng=rng,
        )
        return logits, adjacencies, cache, ci

    def backward_clip(self, dlogits: np.ndarray, cache: dict):
        head_backward(dlogits, cache, self.params)

    def trainable(self) -> list[Parameter]:
        return self.params.all()

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


@dataclass
class BaselineModel:
    w_cls: Parameter
    b_cls: Parameter
    tail: TailParams
    geometry: ClipGeometry
    num_classes: int
    dropout_p: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False)

    def clip_inputs(self, video: SynthVideo, start: int) -> ClipInputs:
        key = (video.video_id, start)
        if key not in self._cache:
            self._cache[key] = build_clip_inputs(video, start, self.geometry, self.tail)
        return self._cache[key]

    def forward_clip(self, video: SynthVideo, start: int, training: bool = False,
                     rng: np.random.Generator | None = None):
        ci = self.clip_inputs(video, start)
        logits, cache = baseline_forward(
            ci.actor_feats, self.w_cls, self.b_cls,
            training=training, dropout_p=self.dropout_p, rng=rng,
        )
        return logits, [], cache, ci

    def backward_clip(self, dlogits: np.ndarray, cache: dict):
        baseline_backward(dlogits, cache, self.w_cls, self.b_cls)

    def trainable(self) -> list[Parameter]:
        return [self.w_cls, self.b_cls]
