"""File formats: feature-map binary, annotation JSON, checkpoints, CSV artifacts.

All writes are atomic (temp file + rename) so interrupted runs never
leave partial artifacts behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .feature_stub import (
    ClipGeometry,
    FeatureMap,
    SynthDataset,
    SynthSpec,
    SynthVideo,
    TailParams,
)
from .gcn_head import GraphHeadConfig, HeadParams
from .tensor_math import Parameter
from .tubes import Box, GroundTruthInstance, Tube

FMAP_MAGIC = b"FMAP"
CKPT_MAGIC = b"CGCN"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# feature-map binary format
# ---------------------------------------------------------------------------


def feature_map_bytes(values: np.ndarray) -> bytes:
    if values.ndim != 4:
        raise ValidationError(f"feature volume must be 4-D, got {values.shape}")
    header = FMAP_MAGIC + struct.pack("<I", FORMAT_VERSION)
    header += struct.pack("<4I", *values.shape)
    return header + values.astype("<f4").tobytes()


def save_feature_map(path: str | Path, values: np.ndarray) -> None:
    atomic_write_bytes(path, feature_map_bytes(values))


def parse_feature_map(payload: bytes) -> np.ndarray:
    if payload[:4] != FMAP_MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r} at byte 0")
    if len(payload) < 8:
        raise FormatError(f"truncated header at byte {len(payload)}")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if len(payload) < 24:
        raise FormatError(f"truncated dims at byte {len(payload)}")
    dims = struct.unpack_from("<4I", payload, 8)
    count = int(np.prod(dims))
    expected = 24 + 4 * count
    if len(payload) != expected:
        raise FormatError(
            f"payload ends at byte {len(payload)}, expected {expected} for dims {dims}"
        )
    data = np.frombuffer(payload, dtype="<f4", offset=24, count=count)
    return data.astype(np.float64).reshape(dims)


def load_feature_map(path: str | Path) -> FeatureMap:
    return FeatureMap(parse_feature_map(Path(path).read_bytes()))


# ---------------------------------------------------------------------------
# annotations JSON
# ---------------------------------------------------------------------------


def _parse_box(obj, where: str) -> Box:
    try:
        if isinstance(obj, dict):
            box = Box(obj["x1"], obj["y1"], obj["x2"], obj["y2"])
        else:
            x1, y1, x2, y2 = obj
            box = Box(x1, y1, x2, y2)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: invalid box {obj!r} ({exc})") from None
    return box


def load_annotations(path: str | Path):
    """Parse the annotation file into tubes and ground-truth instances.

    Returns {video_id: {"num_frames", "tubes", "instances"}}. Schema
    violations raise ValidationError with a JSON-path-qualified message.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    videos = {}
    if not isinstance(doc.get("videos"), list):
        raise ValidationError(f"{path}: top-level 'videos' list missing")
    for vi, vid in enumerate(doc["videos"]):
        where = f"{path}:videos[{vi}]"
        try:
            video_id = vid["id"]
            num_frames = int(vid["num_frames"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"{where}: needs 'id' and integer 'num_frames'") from None
        instances = []
        for ii, inst in enumerate(vid.get("instances", [])):
            iw = f"{where}.instances[{ii}]"
            keyframes = inst.get("keyframes", [])
            if not 1 <= len(keyframes) <= 5:
                raise ValidationError(f"{iw}: {len(keyframes)} keyframes, expected 1..5")
            kfs, objects = [], {}
            for ki, kf in enumerate(keyframes):
                kw = f"{iw}.keyframes[{ki}]"
                frame = int(kf["frame"])
                kfs.append((frame, _parse_box(kf["box"], kw)))
                objects[frame] = [
                    _parse_box(b, f"{kw}.objects[{oi}]")
                    for oi, b in enumerate(kf.get("objects", []))
                ]
            instances.append(
                GroundTruthInstance(video_id, int(inst.get("id", ii)),
                                    int(inst["class"]), kfs, objects)
            )
        tubes = []
        for ti, tube in enumerate(vid.get("tubes", [])):
            tw = f"{where}.tubes[{ti}]"
            boxes = {}
            for bi, b in enumerate(tube.get("boxes", [])):
                boxes[int(b["frame"])] = _parse_box(b, f"{tw}.boxes[{bi}]")
            if not boxes:
                raise ValidationError(f"{tw}: tube has no boxes")
            tubes.append(Tube(video_id, int(tube.get("id", ti)), boxes))
        videos[video_id] = {"num_frames": num_frames, "tubes": tubes,
                            "instances": instances}
    return videos


def annotations_doc(videos: list[SynthVideo]) -> dict:
    out = []
    for v in videos:
        out.append(
            {
                "id": v.video_id,
                "num_frames": v.num_frames,
                "instances": [
                    {
                        "id": v.gt.instance_id,
                        "class": v.gt.label,
                        "keyframes": [
                            {
                                "frame": f,
                                "box": [b.x1, b.y1, b.x2, b.y2],
                                "objects": [
                                    [o.x1, o.y1, o.x2, o.y2]
                                    for o in v.gt.object_boxes.get(f, [])
                                ],
                            }
                            for f, b in v.gt.keyframes
                        ],
                    }
                ],
                "tubes": [
                    {
                        "id": t.tube_id,
                        "boxes": [
                            {"frame": f, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                            for f, b in t.boxes.items()
                        ],
                    }
                    for t in v.tubes
                ],
            }
        )
    return {"version": FORMAT_VERSION, "videos": out}


# ---------------------------------------------------------------------------
# synthetic dataset directory layout
# ---------------------------------------------------------------------------


def save_dataset(dataset: SynthDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    meta = {
        "version": FORMAT_VERSION,
        "seed": dataset.seed,
        "spec": _spec_doc(dataset.spec),
        "splits": {
            "train": [_video_meta(v) for v in dataset.train],
            "test": [_video_meta(v) for v in dataset.test],
        },
    }
    atomic_write_text(out / "dataset.json", json.dumps(meta, indent=1, sort_keys=True))
    atomic_write_text(
        out / "annotations.json",
        json.dumps(annotations_doc(dataset.train + dataset.test), sort_keys=True),
    )
    for v in dataset.train + dataset.test:
        save_feature_map(out / "features" / f"{v.video_id}.fmap", v.volume)


def _spec_doc(spec: SynthSpec) -> dict:
    doc = asdict(spec)
    doc["geometry"] = asdict(spec.geometry)
    return doc


def _video_meta(v: SynthVideo) -> dict:
    return {"id": v.video_id, "label": v.label, "blob_cell": list(v.blob_cell)}


def load_dataset(data_dir: str | Path) -> SynthDataset:
    data = Path(data_dir)
    meta = json.loads((data / "dataset.json").read_text())
    geo = meta["spec"].pop("geometry")
    spec = SynthSpec(**{**meta["spec"], "geometry": ClipGeometry(**geo)})
    ann = load_annotations(data / "annotations.json")

    def build(entries):
        videos = []
        for e in entries:
            vid = e["id"]
            volume = parse_feature_map((data / "features" / f"{vid}.fmap").read_bytes())
            rec = ann[vid]
            videos.append(
                SynthVideo(vid, e["label"], rec["num_frames"], volume,
                           rec["tubes"], rec["instances"][0], tuple(e["blob_cell"]))
            )
        return videos

    return SynthDataset(spec, meta["seed"], build(meta["splits"]["train"]),
                        build(meta["splits"]["test"]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_params(params: list[Parameter]) -> bytes:
    return b"".join(p.value.astype("<f4").tobytes() for p in params)


def save_checkpoint(path: str | Path, model_doc: dict, params: list[Parameter]) -> None:
    config_blob = json.dumps(model_doc, sort_keys=True).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(config_blob))
    payload += config_blob + _pack_params(params)
    atomic_write_bytes(path, payload)


def load_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    payload = Path(path).read_bytes()
    if payload[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {payload[:4]!r} at byte 0")
    version, blob_len = struct.unpack_from("<II", payload, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    blob = payload[12 : 12 + blob_len]
    doc = json.loads(blob.decode("utf-8"))
    flat = np.frombuffer(payload, dtype="<f4", offset=12 + blob_len).astype(np.float64)
    return doc, flat


def assign_flat(params: list[Parameter], flat: np.ndarray) -> None:
    total = sum(p.value.size for p in params)
    if flat.size != total:
        raise FormatError(f"checkpoint holds {flat.size} values, model needs {total}")
    pos = 0
    for p in params:
        n = p.value.size
        p.value[...] = flat[pos : pos + n].reshape(p.value.shape)
        pos += n


def head_config_doc(config: GraphHeadConfig) -> dict:
    return asdict(config)


def head_config_from_doc(doc: dict) -> GraphHeadConfig:
    return GraphHeadConfig(**doc)


def model_param_order(params: HeadParams, tail: TailParams) -> list[Parameter]:
    """Declaration order used in checkpoints: head params, then the frozen tail."""
    return params.all() + [tail.weight, tail.bias]


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def format_float(x: float) -> str:
    return f"{float(x):.10g}"


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            format_float(c) if isinstance(c, float) else str(c) for c in row
        ))
    atomic_write_text(path, "\n".join(lines) + "\n")
