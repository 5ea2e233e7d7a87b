"""Tube scoring, Video-AP/mAP, attention-map assembly and the object-recall metric."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, ValidationError
from .feature_stub import (
    TEMPORAL_STRIDE,
    ClipGeometry,
    SynthDataset,
    SynthVideo,
    valid_clip_starts,
)
from .tensor_math import softmax_rows
from .tubes import GroundTruthInstance, Tube, spatiotemporal_iou

NUM_EVAL_CLIPS = 10
RECALL_THRESHOLDS = np.round(np.arange(0.0, 1.0 + 1e-9, 0.01), 2)


def sample_clip_starts(num_frames: int, geom: ClipGeometry,
                       num_clips: int = NUM_EVAL_CLIPS) -> list[int]:
    """Evenly spaced window starts over the instance (deterministic)."""
    valid = valid_clip_starts(num_frames, geom)
    idx = np.round(np.linspace(0, len(valid) - 1, num_clips)).astype(int)
    return [valid[i] for i in idx]


def score_video_tubes(model, video: SynthVideo,
                      num_clips: int = NUM_EVAL_CLIPS) -> dict[int, np.ndarray]:
    """Average per-clip softmax scores for every tube of a video."""
    starts = sample_clip_starts(video.num_frames, model.geometry, num_clips)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for start in sorted(set(starts)):
        weight = starts.count(start)
        logits, _, _, ci = model.forward_clip(video, start, training=False)
        probs = softmax_rows(logits)
        for row, tube_id in enumerate(ci.tube_ids):
            tube = video.tubes[row]
            if not tube.overlaps_window(start, model.geometry.frames):
                continue
            sums[tube_id] = sums.get(tube_id, 0.0) + weight * probs[row]
            counts[tube_id] = counts.get(tube_id, 0) + weight
    scores = {}
    for tube in video.tubes:
        if tube.tube_id not in counts:
            raise CoverageError(
                f"tube {tube.tube_id} of {video.video_id} overlaps no sampled clip"
            )
        scores[tube.tube_id] = sums[tube.tube_id] / counts[tube.tube_id]
        tube.scores = scores[tube.tube_id]
    return scores


def score_dataset(model, videos: list[SynthVideo],
                  num_clips: int = NUM_EVAL_CLIPS) -> None:
    for video in videos:
        score_video_tubes(model, video, num_clips)


def _precision_envelope_area(tp_flags: list[bool], num_gt: int) -> float:
    if num_gt == 0 or not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # all-points interpolation: area under the running-max-from-right envelope
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def video_ap(tubes: list[Tube], gts: list[GroundTruthInstance], cls: int,
             iou_threshold: float = 0.5) -> float | None:
    """Average precision for one class; greedy matching in score order.

    Detections are ranked by their class-c score; each is matched to the
    highest-IoU unmatched ground truth of the class in the same video
    provided the spatiotemporal IoU reaches the threshold. Returns None
    when the class has no ground truth.
    """
    class_gts = [g for g in gts if g.label == cls]
    if not class_gts:
        return None
    for t in tubes:
        if t.scores is None:
            raise ValidationError(f"tube {t.tube_id} of {t.video_id} is unscored")
    dets = sorted(tubes, key=lambda t: (-float(t.scores[cls]), t.video_id, t.tube_id))
    matched: set[tuple[str, int]] = set()
    tp_flags = []
    for det in dets:
        best, best_iou = None, -1.0
        for gt in sorted(class_gts, key=lambda g: g.instance_id):
            key = (gt.video_id, gt.instance_id)
            if key in matched or gt.video_id != det.video_id:
                continue
            iou = spatiotemporal_iou(det, gt)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = key, iou
        if best is not None:
            matched.add(best)
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    return _precision_envelope_area(tp_flags, len(class_gts))


def video_map(aps: dict[int, float | None]) -> float:
    defined = [v for v in aps.values() if v is not None]
    if not defined:
        raise ValidationError("no class has a defined AP")
    return float(np.mean(defined))


def evaluate_map(model, videos: list[SynthVideo], num_classes: int,
                 num_clips: int = NUM_EVAL_CLIPS) -> dict:
    """Score all tubes and compute per-class AP and mAP."""
    score_dataset(model, videos, num_clips)
    all_tubes = [t for v in videos for t in v.tubes]
    all_gts = [v.gt for v in videos]
    aps = {c: video_ap(all_tubes, all_gts, c) for c in range(num_classes)}
    return {"per_class": aps, "map": video_map(aps)}


def classification_accuracy(videos: list[SynthVideo],
                            labels: dict[str, dict[int, int]]) -> float:
    """Argmax accuracy over action-labeled (non-background) tubes."""
    hits, total = 0, 0
    for video in videos:
        for tube in video.tubes:
            label = labels[video.video_id][tube.tube_id]
            if label < 0:
                continue
            total += 1
            hits += int(np.argmax(tube.scores) == label)
    if total == 0:
        raise ValidationError("no action-labeled tubes to score")
    return hits / total


# ---------------------------------------------------------------------------
# attention maps and the object-recall metric
# ---------------------------------------------------------------------------


def attention_assemble(adjacencies: list[np.ndarray], actor_idx: int,
                       grid: tuple[int, int, int]) -> np.ndarray:
    """Sum one actor's rows over all layer/graph adjacencies; normalize to 1."""
    t, h, w = grid
    total = np.zeros(t * h * w)
    for adj in adjacencies:
        if adj.shape[1] != total.size:
            raise ValidationError(
                f"adjacency has {adj.shape[1]} context nodes, expected {total.size}"
            )
        total += adj[actor_idx]
    return (total / total.sum()).reshape(t, h, w)


def bilinear_upsample(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel-centre alignment, edges clamped."""
    in_h, in_w = plane.shape

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis(out_h, in_h)
    xlo, xhi, fx = axis(out_w, in_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = plane[np.ix_(ylo, xlo)] * (1 - fx) + plane[np.ix_(ylo, xhi)] * fx
    bot = plane[np.ix_(yhi, xlo)] * (1 - fx) + plane[np.ix_(yhi, xhi)] * fx
    return top * (1 - fy) + bot * fy


def attention_upsample(amap: np.ndarray, geom: ClipGeometry, frame_offset: int) -> np.ndarray:
    """Pixel-space attention for one frame, renormalized to total mass 1."""
    if not 0 <= frame_offset < geom.frames:
        raise ValidationError(f"frame offset {frame_offset} outside clip")
    t = min(frame_offset // TEMPORAL_STRIDE, amap.shape[0] - 1)
    up = bilinear_upsample(amap[t], geom.height, geom.width)
    return up / up.sum()


def box_mass(pixel_map: np.ndarray, box) -> float:
    """Attention mass inside a pixel box (integer grid, edges clamped)."""
    h, w = pixel_map.shape
    x1 = max(0, int(math.floor(box.x1)))
    y1 = max(0, int(math.floor(box.y1)))
    x2 = min(w, int(math.ceil(box.x2)))
    y2 = min(h, int(math.ceil(box.y2)))
    return float(pixel_map[y1:y2, x1:x2].sum())


@dataclass
class RecallRecord:
    video_id: str
    label: int
    frame: int
    mass: float  # attention mass inside the object box
    uniform_mass: float  # analytic mass a uniform map would place there


def matched_actor_index(video: SynthVideo) -> int:
    """Index of the tube best matching the video's ground-truth instance."""
    ious = [spatiotemporal_iou(t, video.gt) for t in video.tubes]
    return int(np.argmax(ious))


def attention_records(model, videos: list[SynthVideo]) -> list[RecallRecord]:
    """Object-box attention masses for every annotated keyframe object."""
    records = []
    geom = model.geometry
    for video in videos:
        actor = matched_actor_index(video)
        for frame, _ in video.gt.keyframes:
            objects = video.gt.object_boxes.get(frame, [])
            if not objects:
                continue
            starts = [s for s in valid_clip_starts(video.num_frames, geom)
                      if s <= frame < s + geom.frames]
            start = starts[0]
            _, adjacencies, _, _ = model.forward_clip(video, start, training=False)
            amap = attention_assemble(
                adjacencies, actor, (geom.t_out, geom.h_out, geom.w_out)
            )
            pixel = attention_upsample(amap, geom, frame - start)
            for box in objects:
                records.append(
                    RecallRecord(
                        video.video_id, video.gt.label, frame,
                        mass=box_mass(pixel, box),
                        uniform_mass=box.area / (geom.height * geom.width),
                    )
                )
    return records


def object_recall(records: list[RecallRecord], threshold: float) -> float:
    if not records:
        raise ValidationError("no recall records")
    return float(np.mean([r.mass > threshold for r in records]))


def recall_curve(records: list[RecallRecord],
                 thresholds: np.ndarray = RECALL_THRESHOLDS) -> np.ndarray:
    masses = np.array([r.mass for r in records])
    return np.array([float(np.mean(masses > t)) for t in thresholds])


def per_class_recall_curves(records: list[RecallRecord],
                            thresholds: np.ndarray = RECALL_THRESHOLDS) -> dict[int, np.ndarray]:
    classes = sorted({r.label for r in records})
    return {
        c: recall_curve([r for r in records if r.label == c], thresholds)
        for c in classes
    }


def zero_shot_protocol(dataset: SynthDataset, excluded: set[int],
                       make_model, train_fn) -> tuple[object, list[RecallRecord]]:
    """Train with classes excluded; collect attention records on them only.

    ``make_model()`` builds a fresh untrained GCN model for the dataset;
    ``train_fn(model, train_videos)`` trains it in place.
    """
    present = {v.label for v in dataset.test}
    missing = excluded - present
    if missing:
        raise ValidationError(f"excluded classes {sorted(missing)} absent from test split")
    train_videos = [v for v in dataset.train if v.label not in excluded]
    if not train_videos:
        raise ValidationError("excluding these classes leaves an empty training set")
    model = make_model()
    train_fn(model, train_videos)
    held_out = [v for v in dataset.test if v.label in excluded] or dataset.test
    return model, attention_records(model, held_out)
