"""End-to-end synthetic experiments: build, train and compare both models."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .evaluation import classification_accuracy, evaluate_map
from .feature_stub import SynthDataset, SynthVideo
from .gcn_head import GraphHeadConfig
from .model import BaselineModel, GCNModel
from .training import (
    TrainConfig,
    init_baseline_params,
    init_params,
    init_tail_params,
    train,
)
from .tubes import label_tubes, label_tubes_single_keyframe

# seed offsets so dataset, tail, model init and the training loop draw
# from distinct deterministic streams
TAIL_SEED_OFFSET = 1_000
GCN_SEED_OFFSET = 2_000
BASELINE_SEED_OFFSET = 3_000
LABEL_SEED_OFFSET = 4_000


def default_train_configs(seed: int) -> tuple[TrainConfig, TrainConfig]:
    """Tuned (gcn, baseline) schedules for the default synthetic task."""
    return (
        TrainConfig(base_lr=0.02, total_epochs=450, dropout_p=0.1, seed=seed),
        TrainConfig(base_lr=0.02, total_epochs=150, dropout_p=0.1, seed=seed),
    )


def default_head_config(dataset: SynthDataset, num_layers: int = 1,
                        graphs_per_layer: int = 2, merge: str = "concat",
                        embed_dim: int = 16, use_location: bool = True) -> GraphHeadConfig:
    spec = dataset.spec
    return GraphHeadConfig(
        actor_dim=spec.actor_dim,
        context_dim=spec.context_dim,
        embed_dim=embed_dim,
        num_layers=num_layers,
        graphs_per_layer=graphs_per_layer,
        merge=merge,
        use_location=use_location,
        num_classes=spec.num_classes,
    )


def make_tail(dataset: SynthDataset, seed: int):
    rng = np.random.Generator(np.random.Philox(seed + TAIL_SEED_OFFSET))
    return init_tail_params(dataset.spec.context_dim, dataset.spec.actor_dim, rng)


def make_gcn(dataset: SynthDataset, config: GraphHeadConfig, seed: int,
             dropout_p: float = 0.5) -> GCNModel:
    rng = np.random.Generator(np.random.Philox(seed + GCN_SEED_OFFSET))
    return GCNModel(config, init_params(config, rng), make_tail(dataset, seed),
                    dataset.geometry, dropout_p)


def make_baseline(dataset: SynthDataset, seed: int, dropout_p: float = 0.5) -> BaselineModel:
    spec = dataset.spec
    rng = np.random.Generator(np.random.Philox(seed + BASELINE_SEED_OFFSET))
    w, b = init_baseline_params(spec.actor_dim, spec.num_classes, rng)
    return BaselineModel(w, b, make_tail(dataset, seed), dataset.geometry,
                         spec.num_classes, dropout_p)


def compute_labels(videos: list[SynthVideo], single_keyframe: bool = False,
                   seed: int = 0) -> dict[str, dict[int, int]]:
    """Weak labels for every tube; optionally from one random keyframe per gt."""
    rng = np.random.Generator(np.random.Philox(seed + LABEL_SEED_OFFSET))
    labels = {}
    for v in videos:
        if single_keyframe:
            labels[v.video_id] = label_tubes_single_keyframe(v.tubes, [v.gt], rng)
        else:
            labels[v.video_id] = label_tubes(v.tubes, [v.gt])
    return labels


def run_context_experiment(
    dataset: SynthDataset,
    gcn_cfg: TrainConfig,
    baseline_cfg: TrainConfig,
    head_config: GraphHeadConfig | None = None,
    single_keyframe: bool = False,
) -> dict:
    """Train GCN and baseline on the same data; report accuracy and Video-mAP."""
    if head_config is None:
        head_config = default_head_config(dataset)
    num_classes = dataset.spec.num_classes
    train_labels = compute_labels(dataset.train, single_keyframe, gcn_cfg.seed)
    test_labels = compute_labels(dataset.test)

    gcn = make_gcn(dataset, head_config, gcn_cfg.seed, gcn_cfg.dropout_p)
    gcn_log = train(gcn, dataset.train, train_labels, gcn_cfg)
    gcn_eval = evaluate_map(gcn, dataset.test, num_classes)
    gcn_acc = classification_accuracy(dataset.test, test_labels)

    baseline = make_baseline(dataset, baseline_cfg.seed, baseline_cfg.dropout_p)
    base_log = train(baseline, dataset.train, train_labels, baseline_cfg)
    base_eval = evaluate_map(baseline, dataset.test, num_classes)
    base_acc = classification_accuracy(dataset.test, test_labels)

    return {
        "gcn": {"model": gcn, "log": gcn_log, "map": gcn_eval["map"],
                "per_class": gcn_eval["per_class"], "accuracy": gcn_acc},
        "baseline": {"model": baseline, "log": base_log, "map": base_eval["map"],
                     "per_class": base_eval["per_class"], "accuracy": base_acc},
        "chance_accuracy": 1.0 / num_classes,
    }


def build_model_from_type(dataset: SynthDataset, model_doc: dict, seed: int,
                          dropout_p: float = 0.5):
    """Construct an untrained model from a config-file model section."""
    kind = model_doc.get("type", "gcn")
    if kind == "gcn":
        cfg = default_head_config(
            dataset,
            num_layers=model_doc.get("num_layers", 1),
            graphs_per_layer=model_doc.get("graphs_per_layer", 2),
            merge=model_doc.get("merge", "concat"),
            embed_dim=model_doc.get("embed_dim", 16),
            use_location=model_doc.get("use_location", True),
        )
        return make_gcn(dataset, cfg, seed, dropout_p)
    if kind == "baseline":
        return make_baseline(dataset, seed, dropout_p)
    raise ValidationError(f"unknown model type {kind!r}")
