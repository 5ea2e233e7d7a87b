"""Parameter initialization, loss, cosine schedule and the SGD training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .feature_stub import SynthVideo, TailParams, valid_clip_starts
from .gcn_head import GraphHeadConfig, GraphParams, HeadParams
from .tensor_math import Parameter
from .tubes import BACKGROUND


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float
    total_epochs: int
    batch_clips: int = 3
    dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_epochs < 1 or self.batch_clips < 1:
            raise ValidationError("base_lr must be positive, epochs and batch >= 1")


def _normal(rng, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    # declared convention: std = gain * sqrt(2 / fan_in)
    std = gain * math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, (fan_in, fan_out))


def _phi_uniform(rng, fan_in: int, fan_out: int, first_layer: bool) -> np.ndarray:
    # declared convention: bound = gain * sqrt(6 / (fan_in + fan_out)), gain 1/sqrt(3);
    # the first layer's range is shrunk by 0.01 at both ends
    b = math.sqrt(6.0 / (fan_in + fan_out)) / math.sqrt(3.0)
    lo, hi = (-b + 0.01, b - 0.01) if first_layer else (-b, b)
    if lo >= hi:
        raise ValidationError(f"degenerate init range ({lo}, {hi}) for W_phi")
    return rng.uniform(lo, hi, (fan_in, fan_out))


def init_params(config: GraphHeadConfig, rng: np.random.Generator) -> HeadParams:
    """Normal init for W_theta (gain 1), W and classifier (gain sqrt 2);
    uniform init for W_phi; all biases zero."""
    d = config.embed_dim
    layers = []
    for layer_idx in range(config.num_layers):
        a_in = config.actor_in_dim(layer_idx)
        c_in = config.context_in_dim(layer_idx)
        graphs = []
        for _ in range(config.graphs_per_layer):
            graphs.append(
                GraphParams(
                    w_theta=Parameter(_normal(rng, a_in, d, gain=1.0)),
                    b_theta=Parameter(np.zeros(d)),
                    w_phi=Parameter(_phi_uniform(rng, c_in, d, layer_idx == 0)),
                    b_phi=Parameter(np.zeros(d)),
                    w_out=Parameter(_normal(rng, d, d, gain=math.sqrt(2.0))),
                    b_out=Parameter(np.zeros(d)),
                )
            )
        layers.append(graphs)
    w_cls = Parameter(_normal(rng, config.classifier_in_dim, config.num_classes + 1,
                              gain=math.sqrt(2.0)))
    b_cls = Parameter(np.zeros(config.num_classes + 1))
    return HeadParams(layers, w_cls, b_cls)


def init_baseline_params(actor_dim: int, num_classes: int, rng) -> tuple[Parameter, Parameter]:
    w = Parameter(_normal(rng, actor_dim, num_classes + 1, gain=math.sqrt(2.0)))
    return w, Parameter(np.zeros(num_classes + 1))


def init_tail_params(context_dim: int, actor_dim: int, rng) -> TailParams:
    return TailParams(
        weight=Parameter(_normal(rng, context_dim, actor_dim, gain=math.sqrt(2.0))),
        bias=Parameter(np.zeros(actor_dim)),
    )


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing without restarts: base_lr at 0, zero at total_epochs."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


def label_target(label: int, num_classes: int) -> int:
    """Map an action label or BACKGROUND to a classifier target index."""
    return num_classes if label == BACKGROUND else label


def cross_entropy(logits: np.ndarray, target: int):
    """Softmax cross-entropy for one row; returns (loss, dlogits)."""
    if not 0 <= target < logits.shape[-1]:
        raise ValidationError(f"target {target} outside [0, {logits.shape[-1]})")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[target]
    dlogits = np.exp(shifted - log_z)
    dlogits[target] -= 1.0
    return loss, dlogits


def train(model, videos: list[SynthVideo], labels: dict[str, dict[int, int]],
          cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """SGD over batches of clips; every tube of a batch contributes to the loss.

    Returns the per-epoch log [(epoch, lr, mean_loss)]. Deterministic for
    a fixed seed. Raises NumericError (with the epoch index) on NaN loss.
    """
    if not videos:
        raise ValidationError("empty training set")
    num_classes = model.num_classes if hasattr(model, "num_classes") else None
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    log = []
    for epoch in range(cfg.total_epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(videos))
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch_clips):
            batch = [videos[i] for i in order[b0 : b0 + cfg.batch_clips]]
            starts = []
            for video in batch:
                valid = valid_clip_starts(video.num_frames, model.geometry)
                starts.append(valid[int(rng.integers(len(valid)))])
            total_tubes = sum(len(v.tubes) for v in batch)
            for p in model.trainable():
                p.zero_grad()
            loss_sum = 0.0
            for video, start in zip(batch, starts):
                logits, _, cache, ci = model.forward_clip(video, start, training=True, rng=rng)
                dlogits = np.zeros_like(logits)
                for row, tube_id in enumerate(ci.tube_ids):
                    target = label_target(labels[video.video_id][tube_id], num_classes)
                    loss, drow = cross_entropy(logits[row], target)
                    loss_sum += loss / total_tubes
                    dlogits[row] = drow / total_tubes
                model.backward_clip(dlogits, cache)
            if not np.isfinite(loss_sum):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            for p in model.trainable():
                p.value -= lr * p.grad
            batch_losses.append(loss_sum)
        log.append((epoch, lr, float(np.mean(batch_losses))))
    return log
