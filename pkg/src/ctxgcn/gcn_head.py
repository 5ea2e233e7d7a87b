"""Actor-context graph head: attention adjacency, graph convolution, stacking.

Forward passes save every intermediate needed by the hand-written
backward pass; the DAG is fixed, so backward is a literal reversal of
the forward code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .feature_stub import ClipGeometry, FeatureMap
from .tensor_math import (
    Parameter,
    concat_last,
    concat_last_backward,
    dropout,
    dropout_backward,
    matmul,
    matmul_backward,
    relu,
    relu_backward,
    softmax_rows,
    softmax_rows_backward,
)
from .tubes import Tube

ACTOR_LOC_DIMS = 4  # (cx, cy, w, h)
CONTEXT_LOC_DIMS = 2  # (x, y)


@dataclass(frozen=True)
class GraphHeadConfig:
    actor_dim: int  # D'' of actor features
    context_dim: int  # D' of the feature map
    embed_dim: int = 256  # D, shared projection dim
    num_layers: int = 1
    graphs_per_layer: int = 1
    merge: str = "concat"  # merge mode of the final layer
    use_location: bool = True
    num_classes: int = 10  # action classes C; logits span C+1 with background

    def __post_init__(self):
        if self.merge not in ("concat", "sum"):
            raise ValidationError(f"unknown merge mode {self.merge!r}")
        if self.num_layers < 1 or self.graphs_per_layer < 1:
            raise ValidationError("need at least one layer and one graph")
        if not (self.embed_dim < self.actor_dim and self.embed_dim < self.context_dim):
            raise ValidationError(
                f"embed dim {self.embed_dim} must be smaller than actor dim "
                f"{self.actor_dim} and context dim {self.context_dim}"
            )

    def layer_merge(self, layer: int) -> str:
        # layers before the last always concatenate
        return self.merge if layer == self.num_layers - 1 else "concat"

    def merged_dim(self, layer: int) -> int:
        if self.layer_merge(layer) == "concat":
            return self.graphs_per_layer * self.embed_dim
        return self.embed_dim

    def actor_in_dim(self, layer: int) -> int:
        if layer == 0:
            return self.actor_dim + (ACTOR_LOC_DIMS if self.use_location else 0)
        return self.merged_dim(layer - 1)

    def context_in_dim(self, layer: int) -> int:
        # location channels only augment the first layer's context input
        if layer == 0:
            return self.context_dim + (CONTEXT_LOC_DIMS if self.use_location else 0)
        return self.context_dim

    @property
    def classifier_in_dim(self) -> int:
        return self.merged_dim(self.num_layers - 1)


@dataclass
class GraphParams:
    w_theta: Parameter  # actor transform
    b_theta: Parameter
    w_phi: Parameter  # context transform
    b_phi: Parameter
    w_out: Parameter  # graph-convolution output transform
    b_out: Parameter

    def all(self) -> list[Parameter]:
        return [self.w_theta, self.b_theta, self.w_phi, self.b_phi, self.w_out, self.b_out]


@dataclass
class HeadParams:
    layers: list[list[GraphParams]]  # [layer][graph]
    w_cls: Parameter
    b_cls: Parameter

    def all(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            for g in layer:
                out.extend(g.all())
        out.extend([self.w_cls, self.b_cls])
        return out

    def zero_grads(self):
        for p in self.all():
            p.zero_grad()


def parameter_count(config: GraphHeadConfig) -> dict:
    """Closed-form parameter tally of the graph layers (classifier excluded)."""
    d = config.embed_dim
    per_layer = []
    for layer in range(config.num_layers):
        a_in = config.actor_in_dim(layer)
        c_in = config.context_in_dim(layer)
        per_graph = (a_in + 1) * d + (c_in + 1) * d + (d + 1) * d
        per_layer.append(config.graphs_per_layer * per_graph)
    return {"per_layer": per_layer, "total": sum(per_layer)}


# ---------------------------------------------------------------------------
# location embeddings
# ---------------------------------------------------------------------------


def _axis_coords(n: int) -> np.ndarray:
    # cell i of n maps to 2i/(n-1) - 1; a single-cell axis maps to 0
    if n == 1:
        return np.zeros(1)
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def context_matrix(fm: FeatureMap) -> np.ndarray:
    """Flatten the (D', T', H', W') volume to (M, D') rows in (t, y, x) order."""
    d = fm.channels
    return fm.values.reshape(d, -1).T


def context_coordinates(fm: FeatureMap) -> np.ndarray:
    """Normalized (x, y) of every cell, aligned with ``context_matrix`` rows."""
    _, t, h, w = fm.values.shape
    xs = _axis_coords(w)
    ys = _axis_coords(h)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    per_slice = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
    return np.tile(per_slice, (t, 1))


def embed_context_location(fm: FeatureMap) -> np.ndarray:
    """Context rows with (x, y) coordinates appended along the channel axis."""
    return concat_last([context_matrix(fm), context_coordinates(fm)])


def embed_actor_location(tube: Tube, geom: ClipGeometry, clip_start: int = 0) -> np.ndarray:
    """Average (cx, cy, w, h) of the tube over the clip window, in [-1, 1]."""
    boxes = [b for f, b in tube.boxes.items() if clip_start <= f < clip_start + geom.frames]
    if not boxes:
        raise ValidationError(f"tube {tube.tube_id} has no boxes inside the clip")
    cx = np.mean([(b.x1 + b.x2) / 2 for b in boxes])
    cy = np.mean([(b.y1 + b.y2) / 2 for b in boxes])
    w = np.mean([b.x2 - b.x1 for b in boxes])
    h = np.mean([b.y2 - b.y1 for b in boxes])
    return np.array(
        [
            2.0 * cx / geom.width - 1.0,
            2.0 * cy / geom.height - 1.0,
            2.0 * w / geom.width - 1.0,
            2.0 * h / geom.height - 1.0,
        ]
    )


# ---------------------------------------------------------------------------
# attention and graph convolution primitives
# ---------------------------------------------------------------------------


def relation_scores(actors: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    """Dot-product attention scores between projected actors and contexts."""
    if actors.shape[1] != contexts.shape[1]:
        raise DimensionError(
            f"embedding dims differ: actors {actors.shape}, contexts {contexts.shape}"
        )
    return matmul(actors, contexts.T)


def attention(scores: np.ndarray) -> np.ndarray:
    """Row-stochastic adjacency: softmax over context nodes."""
    return softmax_rows(scores)


def gcn_layer(adjacency, contexts, actors, w_out, b_out) -> np.ndarray:
    """Z = ReLU((G F + A) W + b): weighted context plus identity link."""
    return relu((matmul(adjacency, contexts) + actors) @ w_out + b_out)


def merge_heads(zs: list[np.ndarray], mode: str) -> np.ndarray:
    if mode == "concat":
        return concat_last(zs)
    if mode == "sum":
        out = zs[0].copy()
        for z in zs[1:]:
            if z.shape != out.shape:
                raise DimensionError(f"sum merge shapes differ: {z.shape} vs {out.shape}")
            out += z
        return out
    raise ValidationError(f"unknown merge mode {mode!r}")


# ---------------------------------------------------------------------------
# full head forward / backward
# ---------------------------------------------------------------------------


def head_forward(
    actor_feats: np.ndarray,
    fm: FeatureMap,
    config: GraphHeadConfig,
    params: HeadParams,
    actor_locs: np.ndarray | None = None,
    training: bool = False,
    dropout_p: float = 0.5,
    rng: np.random.Generator | None = None,
):
    """Run all layers and graphs.

    Returns (logits over C+1 classes, adjacency list in layer-major
    order, cache for ``head_backward``). The raw context map feeds every
    layer; location coordinates are appended at the first layer only.
    """
    if actor_feats.ndim != 2 or actor_feats.shape[1] != config.actor_dim:
        raise DimensionError(
            f"actor features {actor_feats.shape} != (N, {config.actor_dim})"
        )
    if fm.channels != config.context_dim:
        raise DimensionError(f"feature map channels {fm.channels} != {config.context_dim}")
    if training and rng is None:
        raise ValidationError("training mode needs an rng for dropout")
    if config.use_location:
        if actor_locs is None:
            raise ValidationError("use_location requires actor location embeddings")
        actor_in = concat_last([actor_feats, actor_locs])
        ctx_first = embed_context_location(fm)
    else:
        actor_in = actor_feats
        ctx_first = context_matrix(fm)
    ctx_raw = context_matrix(fm)

    adjacencies = []
    cache = {"layers": [], "config": config}
    x = actor_in
    for layer_idx, layer in enumerate(params.layers):
        ctx_in = ctx_first if layer_idx == 0 else ctx_raw
        layer_cache = {"x": x, "ctx_in": ctx_in, "graphs": []}
        zs = []
        for g in layer:
            ad, theta_mask = (
                dropout(x, dropout_p, "elementwise", rng, training)
                if layer_idx == 0
                else (x, None)
            )
            fd, phi_mask = dropout(ctx_in, dropout_p, "channelwise", rng, training)
            a = ad @ g.w_theta.value + g.b_theta.value
            f = fd @ g.w_phi.value + g.b_phi.value
            e = relation_scores(a, f)
            adj = attention(e)
            h = adj @ f + a
            hd, h_mask = dropout(h, dropout_p, "elementwise", rng, training)
            s = hd @ g.w_out.value + g.b_out.value
            z = relu(s)
            adjacencies.append(adj)
            zs.append(z)
            layer_cache["graphs"].append(
                dict(ad=ad, theta_mask=theta_mask, fd=fd, phi_mask=phi_mask,
                     a=a, f=f, adj=adj, h=h, hd=hd, h_mask=h_mask, s=s)
            )
        x = merge_heads(zs, config.layer_merge(layer_idx))
        layer_cache["merged"] = x
        cache["layers"].append(layer_cache)

    xd, cls_mask = dropout(x, dropout_p, "elementwise", rng, training)
    logits = xd @ params.w_cls.value + params.b_cls.value
    cache["xd"] = xd
    cache["cls_mask"] = cls_mask if training else None
    return logits, adjacencies, cache


def head_backward(dlogits: np.ndarray, cache: dict, params: HeadParams) -> None:
    """Accumulate gradients of all head parameters given d(logits)."""
    config: GraphHeadConfig = cache["config"]
    dxd, dw = matmul_backward(cache["xd"], params.w_cls.value, dlogits)
    params.w_cls.grad += dw
    params.b_cls.grad += dlogits.sum(axis=0)
    dx = dropout_backward(cache["cls_mask"], dxd) if cache["cls_mask"] is not None else dxd

    for layer_idx in range(config.num_layers - 1, -1, -1):
        layer_cache = cache["layers"][layer_idx]
        layer = params.layers[layer_idx]
        k = config.graphs_per_layer
        if config.layer_merge(layer_idx) == "concat":
            dzs = concat_last_backward([config.embed_dim] * k, dx)
        else:
            dzs = [dx] * k
        dx_prev = None
        for g, gc, dz in zip(layer, layer_cache["graphs"], dzs):
            ds = relu_backward(gc["s"], dz)
            dhd, dw = matmul_backward(gc["hd"], g.w_out.value, ds)
            g.w_out.grad += dw
            g.b_out.grad += ds.sum(axis=0)
            dh = dropout_backward(gc["h_mask"], dhd) if gc["h_mask"] is not None else dhd
            # h = adj @ f + a
            dadj, df = matmul_backward(gc["adj"], gc["f"], dh)
            da = dh.copy()
            de = softmax_rows_backward(gc["adj"], dadj)
            # e = a @ f.T
            da += de @ gc["f"]
            df += de.T @ gc["a"]
            _, dwp = matmul_backward(gc["fd"], g.w_phi.value, df)
            g.w_phi.grad += dwp
            g.b_phi.grad += df.sum(axis=0)
            dad, dwt = matmul_backward(gc["ad"], g.w_theta.value, da)
            g.w_theta.grad += dwt
            g.b_theta.grad += da.sum(axis=0)
            if layer_idx > 0:
                # layer input is the previous merged output; no actor dropout here
                dx_prev = dad if dx_prev is None else dx_prev + dad
        dx = dx_prev  # None at layer 0: actor features are leaves


def baseline_forward(
    actor_feats: np.ndarray,
    w_cls: Parameter,
    b_cls: Parameter,
    training: bool = False,
    dropout_p: float = 0.5,
    rng: np.random.Generator | None = None,
):
    """Context-free classifier: dropout + affine map of actor features."""
    if actor_feats.shape[1] != w_cls.value.shape[0]:
        raise DimensionError(
            f"actor features {actor_feats.shape} vs classifier {w_cls.value.shape}"
        )
    xd, mask = dropout(actor_feats, dropout_p, "elementwise", rng, training)
    logits = xd @ w_cls.value + b_cls.value
    return logits, {"xd": xd, "mask": mask if training else None}


def baseline_backward(dlogits, cache, w_cls: Parameter, b_cls: Parameter) -> None:
    _, dw = matmul_backward(cache["xd"], w_cls.value, dlogits)
    w_cls.grad += dw
    b_cls.grad += dlogits.sum(axis=0)
