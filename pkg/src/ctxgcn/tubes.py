"""Tube data model, spatial/spatiotemporal IoU, weak-supervision labeling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

BACKGROUND = -1  # class index assigned to unmatched tubes

# boxes of a tube are sampled every BOX_STRIDE frames; a query frame uses
# the nearest stored box if it lies strictly within one stride
BOX_STRIDE = 4


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class Tube:
    video_id: str
    tube_id: int
    boxes: dict[int, Box]  # frame -> box, frames strictly increasing
    scores: np.ndarray | None = None  # over C+1 classes once scored

    def __post_init__(self):
        if not self.boxes:
            raise ValidationError(f"tube {self.tube_id}: needs at least one box")
        frames = list(self.boxes)
        if frames != sorted(frames):
            self.boxes = dict(sorted(self.boxes.items()))

    @property
    def frames(self) -> list[int]:
        return list(self.boxes)

    def box_at(self, frame: int) -> Box | None:
        """Stored box at the nearest sampled frame within one box stride."""
        best, best_d = None, BOX_STRIDE
        for f, b in self.boxes.items():
            d = abs(f - frame)
            if d < best_d or (d == best_d < BOX_STRIDE and best is None):
                best, best_d = b, d
        return best

    def overlaps_window(self, start: int, length: int) -> bool:
        return any(start <= f < start + length for f in self.boxes)


@dataclass
class GroundTruthInstance:
    video_id: str
    instance_id: int
    label: int
    keyframes: list[tuple[int, Box]]  # (frame, actor box), 1..5 entries
    object_boxes: dict[int, list[Box]] = field(default_factory=dict)  # frame -> objects

    def __post_init__(self):
        if not 1 <= len(self.keyframes) <= 5:
            raise ValidationError(
                f"instance {self.instance_id}: {len(self.keyframes)} keyframes, "
                "expected 1..5"
            )


def spatial_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter) if inter > 0 else 0.0


def spatiotemporal_iou(tube: Tube, gt: GroundTruthInstance) -> float:
    """Mean over gt keyframes of spatial IoU; missing tube boxes count 0."""
    total = 0.0
    for frame, gt_box in gt.keyframes:
        tb = tube.box_at(frame)
        if tb is not None:
            total += spatial_iou(tb, gt_box)
    return total / len(gt.keyframes)


def label_tubes(
    tubes: list[Tube],
    gts: list[GroundTruthInstance],
    threshold: float = 0.5,
) -> dict[int, int]:
    """Assign each tube the class of its best-matching gt, or background.

    A tube takes an action class only when its spatiotemporal IoU with
    some gt strictly exceeds the threshold; ties on equal max IoU go to
    the lowest gt instance id.
    """
    labels = {}
    for tube in tubes:
        best_iou, best_label = 0.0, BACKGROUND
        for gt in sorted(gts, key=lambda g: g.instance_id):
            iou = spatiotemporal_iou(tube, gt)
            if iou > threshold and iou > best_iou:
                best_iou, best_label = iou, gt.label
        labels[tube.tube_id] = best_label
    return labels


def label_tubes_single_keyframe(
    tubes: list[Tube],
    gts: list[GroundTruthInstance],
    rng: np.random.Generator,
    threshold: float = 0.5,
) -> dict[int, int]:
    """Labeling from one randomly chosen keyframe per gt instance."""
    picks = {}
    for gt in sorted(gts, key=lambda g: g.instance_id):
        picks[gt.instance_id] = gt.keyframes[int(rng.integers(len(gt.keyframes)))]
    labels = {}
    for tube in tubes:
        best_iou, best_label = 0.0, BACKGROUND
        for gt in sorted(gts, key=lambda g: g.instance_id):
            frame, gt_box = picks[gt.instance_id]
            tb = tube.box_at(frame)
            iou = spatial_iou(tb, gt_box) if tb is not None else 0.0
            if iou > threshold and iou > best_iou:
                best_iou, best_label = iou, gt.label
        labels[tube.tube_id] = best_label
    return labels
