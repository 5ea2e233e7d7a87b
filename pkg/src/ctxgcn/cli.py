"""Command-line entry points binding the pipeline into runnable experiments.

Exit codes: 0 success, 1 validation/input failure, 2 numeric failure,
64 unknown subcommand.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, experiment, io_formats
from .errors import FormatError, NumericError, ValidationError
from .feature_stub import ClipGeometry, FeatureMap, SynthSpec, synth_generate
from .gcn_head import GraphHeadConfig, head_backward, head_forward, parameter_count
from .model import BaselineModel, GCNModel
from .tensor_math import grad_check
from .training import TrainConfig, cross_entropy, init_params, train

SUBCOMMANDS = ("synth", "train", "eval", "params", "gradcheck", "attend",
               "recall", "zeroshot")
USAGE = f"usage: ctxgcn {{{'|'.join(SUBCOMMANDS)}}} [--config FILE] [--seed N] [--out DIR]"

GRADCHECK_TOLERANCE = 1e-4
# full-scale head dimensions used by `params` when the config does not override them
FULL_SCALE_DIMS = {"actor_dim": 1024, "context_dim": 832, "embed_dim": 256, "num_classes": 10}


def _load_config(args) -> dict:
    if not args.config:
        raise ValidationError("--config is required for this subcommand")
    path = Path(args.config)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if "seed" not in cfg:
        raise ValidationError("a seed is mandatory (config 'seed' or --seed)")
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg):
    data_dir = cfg.get("data", {}).get("dir")
    if not data_dir or not Path(data_dir).exists():
        raise ValidationError(f"data directory {data_dir!r} does not exist")
    return io_formats.load_dataset(data_dir)


def _train_config(cfg) -> TrainConfig:
    t = cfg.get("training", {})
    return TrainConfig(
        base_lr=t.get("base_lr", 0.02),
        total_epochs=t.get("total_epochs", 450),
        batch_clips=t.get("batch_clips", 3),
        dropout_p=t.get("dropout_p", 0.1),
        seed=cfg["seed"],
    )


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    s = dict(cfg.get("synth", {}))
    geo = s.pop("geometry", None)
    if geo is not None:
        s["geometry"] = ClipGeometry(**geo)
    dataset = synth_generate(SynthSpec(**s), cfg["seed"])
    out = _out_dir(cfg)
    io_formats.save_dataset(dataset, out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg)
    train_cfg = _train_config(cfg)
    model_doc = cfg.get("model", {"type": "gcn"})
    model = experiment.build_model_from_type(dataset, model_doc, cfg["seed"],
                                             train_cfg.dropout_p)
    labels = experiment.compute_labels(
        dataset.train,
        single_keyframe=cfg.get("training", {}).get("single_keyframe", False),
        seed=cfg["seed"],
    )
    log = train(model, dataset.train, labels, train_cfg)
    out = _out_dir(cfg)
    io_formats.write_csv(out / "loss_log.csv", ["epoch", "lr", "mean_loss"],
                         [[e, lr, loss] for e, lr, loss in log])
    doc = dict(model_doc)
    if isinstance(model, GCNModel):
        doc["head"] = io_formats.head_config_doc(model.config)
        params = io_formats.model_param_order(model.params, model.tail)
    else:
        doc["head"] = {"actor_dim": dataset.spec.actor_dim,
                       "num_classes": dataset.spec.num_classes}
        params = [model.w_cls, model.b_cls, model.tail.weight, model.tail.bias]
    io_formats.save_checkpoint(out / "model.ckpt", doc, params)
    print(f"trained {doc.get('type', 'gcn')} model; final loss {log[-1][2]:.6f}")
    return 0


def _load_model(cfg, dataset):
    ckpt = Path(cfg.get("out", ".")) / "model.ckpt"
    if not ckpt.exists():
        raise ValidationError(f"checkpoint {ckpt} does not exist (run `train` first)")
    doc, flat = io_formats.load_checkpoint(ckpt)
    dropout_p = cfg.get("training", {}).get("dropout_p", 0.1)
    model = experiment.build_model_from_type(dataset, doc, cfg["seed"], dropout_p)
    if isinstance(model, GCNModel):
        params = io_formats.model_param_order(model.params, model.tail)
    else:
        params = [model.w_cls, model.b_cls, model.tail.weight, model.tail.bias]
    io_formats.assign_flat(params, flat)
    return model


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg)
    model = _load_model(cfg, dataset)
    num_clips = cfg.get("eval", {}).get("num_clips", evaluation.NUM_EVAL_CLIPS)
    report = evaluation.evaluate_map(model, dataset.test, dataset.spec.num_classes,
                                     num_clips)
    out = _out_dir(cfg)
    rows = [[c, ap if ap is not None else "undefined"]
            for c, ap in sorted(report["per_class"].items())]
    rows.append(["mAP", report["map"]])
    io_formats.write_csv(out / "map_report.csv", ["class", "ap"], rows)
    print(f"Video-mAP@0.5: {report['map']:.4f}")
    return 0


def cmd_params(args) -> int:
    cfg = _load_config(args) if args.config else {"seed": 0}
    dims = {**FULL_SCALE_DIMS, **cfg.get("params", {})}
    if args.table:
        print("layers graphs merge  parameters")
        for layers in (1, 2):
            for graphs in (1, 2, 3):
                for merge in ("concat", "sum"):
                    if graphs == 1 and merge == "sum":
                        continue
                    c = GraphHeadConfig(num_layers=layers, graphs_per_layer=graphs,
                                        merge=merge, use_location=True, **dims)
                    total = parameter_count(c)["total"]
                    print(f"{layers:6d} {graphs:6d} {merge:6s} {total:,}")
        return 0
    m = cfg.get("model", {})
    c = GraphHeadConfig(
        num_layers=m.get("num_layers", 1),
        graphs_per_layer=m.get("graphs_per_layer", 1),
        merge=m.get("merge", "concat"),
        use_location=m.get("use_location", True),
        **dims,
    )
    counts = parameter_count(c)
    for i, n in enumerate(counts["per_layer"]):
        print(f"layer {i + 1}: {n:,}")
    print(f"{counts['total']:,}")
    return 0


def gradcheck_error(seed: int) -> float:
    """Gradient gate on a downscaled random head configuration."""
    rng = np.random.Generator(np.random.Philox(seed))
    config = GraphHeadConfig(
        actor_dim=12, context_dim=8, embed_dim=4,
        num_layers=int(rng.integers(1, 3)),
        graphs_per_layer=int(rng.integers(1, 3)),
        merge=["concat", "sum"][int(rng.integers(2))],
        use_location=True, num_classes=3,
    )
    params = init_params(config, rng)
    fm = FeatureMap(rng.normal(size=(8, 2, 2, 2)))
    n = 2
    actor = rng.normal(size=(n, 12))
    locs = rng.uniform(-1.0, 1.0, (n, 4))
    targets = [int(rng.integers(config.num_classes + 1)) for _ in range(n)]

    def loss_and_grads():
        logits, _, cache = head_forward(actor, fm, config, params, actor_locs=locs)
        total = 0.0
        dlogits = np.zeros_like(logits)
        for i, t in enumerate(targets):
            loss, drow = cross_entropy(logits[i], t)
            total += loss / n
            dlogits[i] = drow / n
        head_backward(dlogits, cache, params)
        return total

    return grad_check(loss_and_grads, params.all(), eps=1e-5)


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    err = gradcheck_error(seed)
    print(f"seed {seed}: max relative gradient error {err:.3e}")
    if err >= GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE}")
    return 0


def _export_attention(model, videos, out: Path) -> None:
    from PIL import Image

    geom = model.geometry
    for video in videos:
        actor = evaluation.matched_actor_index(video)
        frame, _ = video.gt.keyframes[0]
        starts = [s for s in evaluation.valid_clip_starts(video.num_frames, geom)
                  if s <= frame < s + geom.frames]
        _, adjacencies, _, _ = model.forward_clip(video, starts[0], training=False)
        amap = evaluation.attention_assemble(
            adjacencies, actor, (geom.t_out, geom.h_out, geom.w_out))
        pixel = evaluation.attention_upsample(amap, geom, frame - starts[0])
        gray = np.round(255.0 * pixel / pixel.max()).astype(np.uint8)
        img_path = out / f"{video.video_id}_f{frame}.png"
        tmp = img_path.with_suffix(".png.tmp")
        Image.fromarray(gray, mode="L").save(tmp, format="PNG")
        os.replace(tmp, img_path)
        io_formats.save_feature_map(out / f"{video.video_id}_f{frame}.amap",
                                    pixel[None, None])


def cmd_attend(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg)
    model = _load_model(cfg, dataset)
    out = _out_dir(cfg) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    _export_attention(model, dataset.test, out)
    print(f"exported attention maps for {len(dataset.test)} videos to {out}")
    return 0


def _write_recall_csv(path, records) -> None:
    thresholds = evaluation.RECALL_THRESHOLDS
    curves = evaluation.per_class_recall_curves(records, thresholds)
    overall = evaluation.recall_curve(records, thresholds)
    header = ["threshold"] + [f"class_{c}" for c in sorted(curves)] + ["overall"]
    rows = []
    for i, t in enumerate(thresholds):
        rows.append([float(t)] + [float(curves[c][i]) for c in sorted(curves)]
                    + [float(overall[i])])
    io_formats.write_csv(path, header, rows)


def cmd_recall(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg)
    model = _load_model(cfg, dataset)
    records = evaluation.attention_records(model, dataset.test)
    out = _out_dir(cfg)
    _write_recall_csv(out / "recall_curves.csv", records)
    print(f"recall at t=0.2: {evaluation.object_recall(records, 0.2):.4f}")
    return 0


def cmd_zeroshot(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg)
    excluded = set(cfg.get("zeroshot", {}).get("excluded", []))
    if not excluded:
        raise ValidationError("zeroshot requires config zeroshot.excluded")
    train_cfg = _train_config(cfg)
    head_cfg = experiment.default_head_config(
        dataset, **{k: v for k, v in cfg.get("model", {}).items() if k != "type"})

    def train_fn(model, vids):
        labels = experiment.compute_labels(vids, seed=cfg["seed"])
        train(model, vids, labels, train_cfg)

    _, records = evaluation.zero_shot_protocol(
        dataset, excluded,
        lambda: experiment.make_gcn(dataset, head_cfg, cfg["seed"], train_cfg.dropout_p),
        train_fn,
    )
    out = _out_dir(cfg)
    _write_recall_csv(out / "zero_shot_recall.csv", records)
    print(f"zero-shot recall at t=0.2: {evaluation.object_recall(records, 0.2):.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
    "attend": cmd_attend,
    "recall": cmd_recall,
    "zeroshot": cmd_zeroshot,
}


def run_command(argv: list[str]) -> int:
    if not argv or argv[0] not in COMMANDS:
        print(USAGE, file=sys.stderr)
        return 64
    parser = argparse.ArgumentParser(prog=f"ctxgcn {argv[0]}")
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    if argv[0] == "params":
        parser.add_argument("--table", action="store_true")
    try:
        args = parser.parse_args(argv[1:])
    except SystemExit:
        return 64
    threads = os.environ.get("CTXGCN_THREADS")
    if threads is not None and int(threads) < 1:
        raise ValidationError("CTXGCN_THREADS must be >= 1")
    try:
        return COMMANDS[argv[0]](args)
    except (ValidationError, FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
