"""Graph network detector: vertex-state embedding, auto-registration GNN
iterations, classification/localization heads, losses and detection.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .boxes import decode_boxes
from .classes import ClassSpec
from .graph import build_graph, radius_pairs
from .nn import (GroupIndex, Mlp, grad_check, init_mlp, max_aggregate, max_aggregate_backward,
                 mlp_backward, mlp_forward, relu_signature)
from .pointcloud import PointCloud, voxel_downsample
from .postprocess import nms_clusters

LOG_CLAMP = 1e-12
HUBER_DELTA = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes. The last entry of ``embed_units`` is the raw-point feature
    width; ``post_units[-1]`` and ``g_units[-1]`` must equal ``state_dim``."""

    state_dim: int = 64
    embed_units: tuple = (32, 64)
    post_units: tuple = (64, 64)
    f_units: tuple = (64, 64)
    g_units: tuple = (64, 64)
    h_units: tuple = (64, 3)
    cls_hidden: tuple = (64,)
    loc_units: tuple = (64, 64, 7)
    iterations: int = 2
    auto_registration: bool = True

    def __post_init__(self):
        if self.post_units[-1] != self.state_dim or self.g_units[-1] != self.state_dim:
            raise ValueError("post_units and g_units must end in state_dim")
        if self.h_units[-1] != 3 or self.loc_units[-1] != 7:
            raise ValueError("MLP_h must output 3 values and MLP_loc 7")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")


@dataclass
class IterationParams:
    mlp_h: Mlp
    mlp_f: Mlp
    mlp_g: Mlp


@dataclass
class PointGnnParams:
    embed_point: Mlp
    embed_post: Mlp
    iterations: list
    head_cls: Mlp
    head_loc: list
    auto_registration: bool = True

    @property
    def T(self) -> int:
        return len(self.iterations)

    def named_mlps(self):
        yield "embed_point", self.embed_point
        yield "embed_post", self.embed_post
        for t, it in enumerate(self.iterations):
            yield f"gnn{t}.h", it.mlp_h
            yield f"gnn{t}.f", it.mlp_f
            yield f"gnn{t}.g", it.mlp_g
        yield "cls", self.head_cls
        for c, m in enumerate(self.head_loc):
            yield f"loc{c}", m

    def arrays(self) -> dict:
        """Name -> array views; in-place edits change the parameters."""
        out = {}
        for name, mlp in self.named_mlps():
            out.update(mlp.arrays(name))
        return out

    def weight_arrays(self):
        for _, mlp in self.named_mlps():
            yield from mlp.weights

    def map_mlps(self, fn) -> "PointGnnParams":
        return PointGnnParams(
            fn(self.embed_point), fn(self.embed_post),
            [IterationParams(fn(it.mlp_h), fn(it.mlp_f), fn(it.mlp_g)) for it in self.iterations],
            fn(self.head_cls), [fn(m) for m in self.head_loc], self.auto_registration)

    def zeros_like(self) -> "PointGnnParams":
        return self.map_mlps(Mlp.zeros_like)

    def copy(self) -> "PointGnnParams":
        return self.map_mlps(Mlp.copy)

    def load_arrays(self, arrays: dict) -> None:
        own = self.arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}")
        for name, arr in own.items():
            if arrays[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {arr.shape}")
            arr[...] = arrays[name]


def init_params(cfg: ModelConfig, class_spec: ClassSpec, seed: int = 0) -> PointGnnParams:
    """Glorot init; MLP_h's last layer is zero so registration starts switched off."""
    rng = np.random.default_rng(seed)
    k = cfg.state_dim
    embed_point = init_mlp(4, cfg.embed_units, rng)
    embed_post = init_mlp(cfg.embed_units[-1], cfg.post_units, rng)
    iterations = []
    for _ in range(cfg.iterations):
        iterations.append(IterationParams(
            mlp_h=init_mlp(k, cfg.h_units, rng, zero_last=True),
            mlp_f=init_mlp(3 + k, cfg.f_units, rng),
            mlp_g=init_mlp(cfg.f_units[-1], cfg.g_units, rng)))
    head_cls = init_mlp(k, cfg.cls_hidden + (class_spec.num_classes,), rng)
    head_loc = [init_mlp(k, cfg.loc_units, rng) for _ in class_spec.localized]
    return PointGnnParams(embed_point, embed_post, iterations, head_cls, head_loc, cfg.auto_registration)


# ---------------------------------------------------------------------------
# scatter helpers


def incidence(ids: np.ndarray, count: int) -> sparse.csr_matrix:
    """(count, len(ids)) 0/1 matrix; ``incidence(ids, n) @ rows`` sums rows per id."""
    ids = np.asarray(ids, dtype=np.int64)
    return sparse.csr_matrix((np.ones(len(ids)), (ids, np.arange(len(ids)))), shape=(count, len(ids)))


def segment_sum(values: np.ndarray, ids: np.ndarray, count: int) -> np.ndarray:
    return np.asarray(incidence(ids, count) @ values)


# ---------------------------------------------------------------------------
# vertex state initialization


@dataclass
class EmbedCache:
    n_pairs: int
    point_cache: object
    argmax: np.ndarray
    post_cache: object


def gather_raw(raw: PointCloud, vertices_xyz: np.ndarray, r0: float):
    """(vertex, raw point) index pairs within ``r0``, sorted by vertex."""
    return radius_pairs(vertices_xyz, raw.xyz, r0)


def init_vertex_state(raw: PointCloud, vertices_xyz: np.ndarray, r0: float, params: PointGnnParams,
                      pairs=None):
    """Embed raw points within ``r0`` of each vertex, max-pool, then refine.

    Returns ``(states, cache)``.
    """
    if r0 <= 0:
        raise ValueError(f"r0 must be positive, got {r0}")
    vertices_xyz = np.asarray(vertices_xyz, dtype=np.float64).reshape(-1, 3)
    v_idx, p_idx = gather_raw(raw, vertices_xyz, r0) if pairs is None else pairs
    feats = np.empty((len(v_idx), 4))
    feats[:, :3] = raw.xyz[p_idx] - vertices_xyz[v_idx]
    feats[:, 3] = raw.intensity[p_idx]
    h, point_cache = mlp_forward(params.embed_point, feats)
    pooled, argmax = max_aggregate(h, GroupIndex(v_idx, len(vertices_xyz)))
    states, post_cache = mlp_forward(params.embed_post, pooled)
    return states, EmbedCache(len(v_idx), point_cache, argmax, post_cache)


def init_vertex_state_backward(params: PointGnnParams, cache: EmbedCache, grad_states, grads: PointGnnParams):
    g_post, g_pooled = mlp_backward(params.embed_post, cache.post_cache, grad_states)
    g_h = max_aggregate_backward(g_pooled, cache.argmax, cache.n_pairs)
    g_point, _ = mlp_backward(params.embed_point, cache.point_cache, g_h)
    _accumulate(grads.embed_post, g_post)
    _accumulate(grads.embed_point, g_point)


# ---------------------------------------------------------------------------
# GNN iteration


@dataclass
class IterationCache:
    states: np.ndarray
    rel: np.ndarray
    h_cache: object
    f_pre0: np.ndarray
    f_tail_cache: object
    g_cache: object
    argmax: np.ndarray
    auto_registration: bool
    offsets: np.ndarray


@dataclass
class EdgeIndex:
    """Edge endpoints plus scatter matrices summing edge rows per vertex."""

    src: np.ndarray
    dst: np.ndarray
    by_src: sparse.csr_matrix
    by_dst: sparse.csr_matrix

    @classmethod
    def build(cls, edges: np.ndarray, n: int) -> "EdgeIndex":
        src, dst = edges[:, 0], edges[:, 1]
        return cls(src, dst, incidence(src, n), incidence(dst, n))


def _tail(mlp: Mlp) -> Mlp:
    return Mlp(mlp.weights[1:], mlp.biases[1:])


def gnn_iteration(xyz: np.ndarray, edges: np.ndarray, states: np.ndarray, it: IterationParams,
                  auto_registration: bool = True, index: EdgeIndex = None):
    """One refinement step; returns ``(new_states, cache)``.

    Edge (j -> i) carries ``MLP_f([x_j - x_i + dx_i, s_j])``; vertex i takes the
    column-wise max of its incoming edge features through ``MLP_g`` plus a
    residual connection. Vertices without in-edges pool to zero.
    """
    n, k = states.shape
    if it.mlp_f.in_dim != 3 + k or it.mlp_g.out_dim != k or (auto_registration and it.mlp_h.in_dim != k):
        raise ValueError(f"state width {k} does not match iteration parameters")
    if index is None:
        index = EdgeIndex.build(edges, n)
    src, dst = index.src, index.dst
    rel = xyz[src] - xyz[dst]
    h_cache = offsets = None
    if auto_registration:
        offsets, h_cache = mlp_forward(it.mlp_h, states)
        rel = rel + offsets[dst]
    # first layer of MLP_f split as rel @ W[:3] + (s @ W[3:])[src]; the state
    # product is computed once per vertex instead of once per edge
    w0, b0 = it.mlp_f.weights[0], it.mlp_f.biases[0]
    per_vertex_t = w0[3:].T @ states.T + b0[:, None]
    pre0 = per_vertex_t[:, src].T
    pre0 += rel @ w0[:3]
    if len(it.mlp_f.weights) > 1:
        e, tail_cache = mlp_forward(_tail(it.mlp_f), np.maximum(pre0, 0.0))
    else:
        e, tail_cache = pre0, None
    pooled, argmax = max_aggregate(e, GroupIndex(dst, n))
    update, g_cache = mlp_forward(it.mlp_g, pooled)
    cache = IterationCache(states, rel, h_cache, pre0, tail_cache, g_cache, argmax, auto_registration, offsets)
    return update + states, cache


def gnn_iteration_backward(edges: np.ndarray, it: IterationParams, cache: IterationCache,
                           grad_new: np.ndarray, grads: IterationParams, index: EdgeIndex = None) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return d loss / d states."""
    n = len(grad_new)
    if index is None:
        index = EdgeIndex.build(edges, n)
    grad_states = grad_new.copy()
    g_g, g_pooled = mlp_backward(it.mlp_g, cache.g_cache, grad_new)
    _accumulate(grads.mlp_g, g_g)
    g_e = max_aggregate_backward(g_pooled, cache.argmax, len(index.src))
    if cache.f_tail_cache is not None:
        g_tail, g_hidden = mlp_backward(_tail(it.mlp_f), cache.f_tail_cache, g_e)
        for a, b in zip(grads.mlp_f.weights[1:], g_tail.weights):
            a += b
        for a, b in zip(grads.mlp_f.biases[1:], g_tail.biases):
            a += b
        g_pre0 = np.where(cache.f_pre0 > 0, g_hidden, 0.0)
    else:
        g_pre0 = g_e
    w0 = it.mlp_f.weights[0]
    per_vertex_grad = np.asarray(index.by_src @ g_pre0)
    grads.mlp_f.weights[0][:3] += cache.rel.T @ g_pre0
    grads.mlp_f.weights[0][3:] += cache.states.T @ per_vertex_grad
    grads.mlp_f.biases[0] += per_vertex_grad.sum(axis=0)
    grad_states += per_vertex_grad @ w0[3:].T
    if cache.auto_registration:
        g_off = np.asarray(index.by_dst @ (g_pre0 @ w0[:3].T))
        g_h, g_s = mlp_backward(it.mlp_h, cache.h_cache, g_off)
        _accumulate(grads.mlp_h, g_h)
        grad_states += g_s
    return grad_states


# ---------------------------------------------------------------------------
# heads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


@dataclass
class RawPrediction:
    """``probs`` (V, M) class distribution; ``deltas`` (V, L, 7) encoded box
    per localized class."""

    probs: np.ndarray
    deltas: np.ndarray


@dataclass
class HeadCache:
    cls_cache: object
    loc_caches: list


def predict(states: np.ndarray, params: PointGnnParams):
    logits, cls_cache = mlp_forward(params.head_cls, states)
    deltas, loc_caches = [], []
    for m in params.head_loc:
        d, c = mlp_forward(m, states)
        deltas.append(d)
        loc_caches.append(c)
    deltas = np.stack(deltas, axis=1) if deltas else np.zeros((len(states), 0, 7))
    return RawPrediction(softmax(logits), deltas), HeadCache(cls_cache, loc_caches)


# ---------------------------------------------------------------------------
# losses


def classification_loss(probs: np.ndarray, onehot: np.ndarray, weights=None) -> float:
    """Average cross-entropy; rows with weight 0 are excluded from sum and count."""
    n = len(probs)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if n == 0 or w.sum() == 0:
        raise ValueError("classification loss needs at least one vertex")
    logp = np.log(np.maximum(probs, LOG_CLAMP))
    return float(-(w[:, None] * onehot * logp).sum() / w.sum())


def huber(a: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    abs_a = np.abs(a)
    return np.where(abs_a <= delta, 0.5 * a * a, delta * (abs_a - 0.5 * delta))


def huber_grad(a: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    return np.clip(a, -delta, delta)


def localization_loss(pred_deltas: np.ndarray, targets: np.ndarray, mask: np.ndarray, n: int) -> float:
    """Huber loss summed over the 7 components of masked vertices, divided by ``n``.

    ``pred_deltas`` are the predictions for each vertex's labeled class.
    """
    mask = np.asarray(mask, dtype=bool)
    if n <= 0:
        raise ValueError("localization loss needs n > 0")
    return float(huber(pred_deltas[mask] - targets[mask]).sum() / n)


def regularization_loss(params: PointGnnParams) -> float:
    """L1 norm of all MLP weights (biases excluded)."""
    return float(sum(np.abs(w).sum() for w in params.weight_arrays()))


def total_loss(l_cls: float, l_loc: float, l_reg: float, alpha: float, beta: float, gamma: float) -> float:
    if min(alpha, beta, gamma) < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * l_cls + beta * l_loc + gamma * l_reg


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 5e-7


# ---------------------------------------------------------------------------
# full network on one prepared sample


@dataclass
class Sample:
    """A prepared training/inference input: raw cloud, graph vertices and
    edges, raw-gather pairs and (optionally) vertex labels."""

    raw: PointCloud
    xyz: np.ndarray
    edges: np.ndarray
    pairs: tuple
    classes: np.ndarray = None
    targets: np.ndarray = None
    has_target: np.ndarray = None


def prepare_sample(raw: PointCloud, vertices: PointCloud, edges: np.ndarray, r0: float, labels=None) -> Sample:
    pairs = gather_raw(raw, vertices.xyz, r0)
    s = Sample(raw, vertices.xyz, edges, pairs)
    if labels is not None:
        s.classes, s.targets, s.has_target = labels.classes, labels.targets, labels.has_target
    return s


@dataclass
class Trace:
    embed: EmbedCache
    iterations: list
    heads: HeadCache
    states: list
    prediction: RawPrediction
    index: EdgeIndex = None

    def signature(self) -> bytes:
        """Activation pattern and pooling winners; changes across a kink."""
        parts = [relu_signature(self.embed.point_cache), relu_signature(self.embed.post_cache),
                 self.embed.argmax.tobytes()]
        for c in self.iterations:
            if c.h_cache is not None:
                parts.append(relu_signature(c.h_cache))
            parts.append(np.packbits(c.f_pre0 > 0).tobytes())
            if c.f_tail_cache is not None:
                parts.append(relu_signature(c.f_tail_cache))
            parts += [relu_signature(c.g_cache), c.argmax.tobytes()]
        parts.append(relu_signature(self.heads.cls_cache))
        parts += [relu_signature(c) for c in self.heads.loc_caches]
        return b"".join(parts)


def forward(params: PointGnnParams, sample: Sample, r0: float, auto_registration=None,
            iterations=None) -> Trace:
    """Run embedding, ``iterations`` (default all) GNN steps and the heads."""
    auto = params.auto_registration if auto_registration is None else auto_registration
    n_it = params.T if iterations is None else iterations
    s, embed_cache = init_vertex_state(sample.raw, sample.xyz, r0, params, sample.pairs)
    states, caches = [s], []
    index = EdgeIndex.build(sample.edges, len(sample.xyz)) if n_it else None
    for it in params.iterations[:n_it]:
        s, c = gnn_iteration(sample.xyz, sample.edges, s, it, auto, index)
        states.append(s)
        caches.append(c)
    pred, head_cache = predict(s, params)
    return Trace(embed_cache, caches, head_cache, states, pred, index)


def sample_losses(trace: Trace, sample: Sample, class_spec: ClassSpec):
    """(l_cls, l_loc, N) for a labeled sample."""
    pred = trace.prediction
    weight = (sample.classes != class_spec.dont_care).astype(np.float64)
    n = weight.sum()
    if n == 0:
        raise ValueError("sample has no supervised vertices")
    onehot = np.eye(class_spec.num_classes)[sample.classes]
    l_cls = classification_loss(pred.probs, onehot, weight)
    mask = sample.has_target & (weight > 0)
    chosen = _labeled_deltas(pred.deltas, sample.classes, mask)
    l_loc = localization_loss(chosen, sample.targets, mask, n)
    return l_cls, l_loc, n


def _labeled_deltas(deltas: np.ndarray, classes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros((len(classes), 7))
    idx = np.flatnonzero(mask)
    out[idx] = deltas[idx, classes[idx] - 1]
    return out


def sample_loss_and_grad(params: PointGnnParams, sample: Sample, class_spec: ClassSpec, r0: float,
                         weights: LossWeights, grads: PointGnnParams = None, scale: float = 1.0):
    """Data loss ``alpha*l_cls + beta*l_loc`` and its gradient.

    Gradients (times ``scale``) are accumulated into ``grads`` if given, else
    into a fresh zero structure. Returns ``(l_cls, l_loc, grads, trace)``.
    """
    if grads is None:
        grads = params.zeros_like()
    trace = forward(params, sample, r0)
    l_cls, l_loc, n = sample_losses(trace, sample, class_spec)
    if not (np.isfinite(l_cls) and np.isfinite(l_loc)):
        # leave grads untouched; the caller reports the non-finite loss
        return l_cls, l_loc, grads, trace
    pred = trace.prediction
    weight = (sample.classes != class_spec.dont_care).astype(np.float64)

    # softmax + cross-entropy: d/dlogits = w/N (p - y), zero where the log clamps
    onehot = np.eye(class_spec.num_classes)[sample.classes]
    p_label = pred.probs[np.arange(len(weight)), sample.classes]
    active = weight * (p_label >= LOG_CLAMP)
    g_logits = (scale * weights.alpha / n) * active[:, None] * (pred.probs - onehot)

    g_states = np.zeros_like(trace.states[-1])
    g_cls, g_s = mlp_backward(params.head_cls, trace.heads.cls_cache, g_logits)
    _accumulate(grads.head_cls, g_cls)
    g_states += g_s

    mask = sample.has_target & (weight > 0)
    chosen = _labeled_deltas(pred.deltas, sample.classes, mask)
    g_chosen = (scale * weights.beta / n) * huber_grad(chosen - sample.targets) * mask[:, None]
    for slot, m in enumerate(params.head_loc):
        rows = mask & (sample.classes - 1 == slot)
        if not rows.any():
            continue
        g_d = np.where(rows[:, None], g_chosen, 0.0)
        g_loc, g_s = mlp_backward(m, trace.heads.loc_caches[slot], g_d)
        _accumulate(grads.head_loc[slot], g_loc)
        g_states += g_s

    for t in range(len(trace.iterations) - 1, -1, -1):
        g_states = gnn_iteration_backward(sample.edges, params.iterations[t], trace.iterations[t],
                                          g_states, grads.iterations[t], trace.index)
    init_vertex_state_backward(params, trace.embed, g_states, grads)
    return l_cls, l_loc, grads, trace


def add_regularization_grad(params: PointGnnParams, grads: PointGnnParams, gamma: float) -> None:
    for gw, w in zip(grads.weight_arrays(), params.weight_arrays()):
        gw += gamma * np.sign(w)


def gradient_check(params: PointGnnParams, sample: Sample, class_spec: ClassSpec, r0: float,
                   weights: LossWeights, probes: int = 500, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of the analytic gradient of the total loss against
    central differences over ``probes`` random parameter coordinates."""
    grads = params.zeros_like()
    sample_loss_and_grad(params, sample, class_spec, r0, weights, grads)
    add_regularization_grad(params, grads, weights.gamma)
    holder = {}

    def loss():
        trace = forward(params, sample, r0)
        holder["trace"] = trace
        l_cls, l_loc, _ = sample_losses(trace, sample, class_spec)
        return total_loss(l_cls, l_loc, regularization_loss(params), weights.alpha, weights.beta, weights.gamma)

    return grad_check(loss, params.arrays(), grads.arrays(), probes, h=h, seed=seed,
                      signature=lambda: holder["trace"].signature())


def _accumulate(target: Mlp, delta: Mlp) -> None:
    for a, b in zip(target.weights, delta.weights):
        a += b
    for a, b in zip(target.biases, delta.biases):
        a += b


# ---------------------------------------------------------------------------
# detection


@dataclass
class Detection:
    box: np.ndarray
    class_name: str
    score: float
    vertex: int


@dataclass(frozen=True)
class InferenceConfig:
    radius: float = 4.0
    r0: float = 1.0
    voxel_size: float = 0.4
    voxel_mode: str = "random"
    nms_threshold: float = 0.01
    nms_mode: str = "merge+score"
    seed: int = 0
    auto_registration: bool = None
    iterations: int = None


def detect(params: PointGnnParams, class_spec: ClassSpec, cloud: PointCloud, cfg: InferenceConfig,
           return_graph: bool = False):
    """Full pipeline on a raw cloud: downsample, graph, GNN, decode, NMS."""
    if len(cloud) == 0:
        return ([], None) if return_graph else []
    vd = voxel_downsample(cloud, cfg.voxel_size, cfg.voxel_mode, cfg.seed)
    graph = build_graph(vd.cloud, cfg.radius)
    sample = prepare_sample(cloud, vd.cloud, graph.edges, cfg.r0)
    trace = forward(params, sample, cfg.r0, cfg.auto_registration, cfg.iterations)
    dets = decode_detections(trace.prediction, vd.cloud.xyz, class_spec, cfg)
    return (dets, graph) if return_graph else dets


def decode_detections(pred: RawPrediction, xyz: np.ndarray, class_spec: ClassSpec,
                      cfg: InferenceConfig) -> list:
    top = np.argmax(pred.probs, axis=1)
    dets = []
    for raw_class in class_spec.object_classes:
        cls_ids = [c for c in class_spec.localized if class_spec.raw_classes[c] == raw_class]
        verts = np.flatnonzero(np.isin(top, cls_ids))
        if len(verts) == 0:
            continue
        consts = np.array([class_spec.constants[c].as_tuple() for c in top[verts]])
        enc = pred.deltas[verts, top[verts] - 1]
        boxes = decode_boxes(enc, xyz[verts], consts)
        scores = pred.probs[verts, top[verts]]
        for cl in nms_clusters(boxes, scores, cfg.nms_threshold, xyz, cfg.nms_mode):
            dets.append(Detection(cl.box, raw_class, cl.score, int(verts[cl.seed])))
    dets.sort(key=lambda d: -d.score)
    return dets


def with_overrides(cfg: InferenceConfig, **kw) -> InferenceConfig:
    return replace(cfg, **kw)
