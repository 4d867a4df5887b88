import math

import numpy as np
import pytest

from pointgnn.classes import car_classes
from pointgnn.config import toy_preset
from pointgnn.graph import build_graph
from pointgnn.model import (InferenceConfig, LossWeights, ModelConfig, classification_loss, detect, forward,
                            gnn_iteration, gradient_check, huber, init_params, init_vertex_state,
                            localization_loss, predict, prepare_sample, regularization_loss, total_loss)
from pointgnn.nn import Mlp
from pointgnn.pointcloud import PointCloud
from pointgnn.training import gradcheck_sample

SMALL = ModelConfig(state_dim=8, embed_units=(6, 7), post_units=(8, 8), f_units=(9, 8), g_units=(8, 8),
                    h_units=(5, 3), cls_hidden=(6,), loc_units=(6, 7), iterations=2)


def relu(x):
    return np.maximum(x, 0.0)


def run_mlp(m: Mlp, v):
    """Row-vector evaluation, written out layer by layer."""
    h = np.asarray(v, dtype=np.float64)
    for k in range(len(m.weights)):
        h = h @ m.weights[k] + m.biases[k]
        if k < len(m.weights) - 1:
            h = relu(h)
    return h


def randomize(params, rng, scale=0.3):
    for arr in params.arrays().values():
        arr[...] = rng.normal(0, scale, arr.shape)
    return params


def scene(rng, n_raw=120, n_vert=20, extent=6.0):
    raw = PointCloud(rng.uniform(0, extent, (n_raw, 3)), rng.uniform(0, 1, n_raw))
    verts = raw.subset(np.sort(rng.choice(n_raw, n_vert, replace=False)))
    return raw, verts, build_graph(verts, 2.5).edges


# --- embedding -------------------------------------------------------------

def test_init_state_matches_gather_oracle(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    raw, verts, _ = scene(rng)
    states, _ = init_vertex_state(raw, verts.xyz, 1.0, params)
    for i, v in enumerate(verts.xyz):
        feats = [run_mlp(params.embed_point, np.r_[p - v, a])
                 for p, a in zip(raw.xyz, raw.intensity) if np.linalg.norm(p - v) < 1.0]
        pooled = np.max(feats, axis=0) if feats else np.zeros(7)
        assert np.allclose(states[i], run_mlp(params.embed_post, pooled), atol=1e-12)


def test_init_state_single_coincident_point(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    raw = PointCloud([[1.0, 2.0, 3.0]], [0.4])
    states, _ = init_vertex_state(raw, raw.xyz, 1.0, params)
    expected = run_mlp(params.embed_post, run_mlp(params.embed_point, [0, 0, 0, 0.4]))
    assert np.allclose(states[0], expected, atol=1e-14)


def test_zero_params_zero_states(rng):
    params = init_params(SMALL, car_classes()).zeros_like()
    raw, verts, _ = scene(rng)
    assert np.all(init_vertex_state(raw, verts.xyz, 1.0, params)[0] == 0)
    with pytest.raises(ValueError):
        init_vertex_state(raw, verts.xyz, 0.0, params)


# --- GNN iteration ---------------------------------------------------------

def test_iteration_matches_per_edge_loop(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    _, verts, edges = scene(rng)
    xyz = verts.xyz
    s = rng.normal(size=(len(xyz), 8))
    it = params.iterations[0]
    new, _ = gnn_iteration(xyz, edges, s, it, auto_registration=True)
    for i in range(len(xyz)):
        dx = run_mlp(it.mlp_h, s[i])
        msgs = [run_mlp(it.mlp_f, np.r_[xyz[j] - xyz[i] + dx, s[j]]) for j, d in edges if d == i]
        pooled = np.max(msgs, axis=0) if msgs else np.zeros(8)
        assert np.allclose(new[i], run_mlp(it.mlp_g, pooled) + s[i], atol=1e-12)


def test_zero_offset_reduces_to_plain_form(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    _, verts, edges = scene(rng)
    s = rng.normal(size=(len(verts), 8))
    it = params.iterations[0]
    it.mlp_h.weights[-1][...] = 0.0
    it.mlp_h.biases[-1][...] = 0.0
    on, _ = gnn_iteration(verts.xyz, edges, s, it, True)
    off, _ = gnn_iteration(verts.xyz, edges, s, it, False)
    assert np.array_equal(on, off)


def test_zero_update_is_residual_identity(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    _, verts, edges = scene(rng)
    s = rng.normal(size=(len(verts), 8))
    it = params.iterations[1]
    it.mlp_g.weights[-1][...] = 0.0
    it.mlp_g.biases[-1][...] = 0.0
    assert np.array_equal(gnn_iteration(verts.xyz, edges, s, it)[0], s)


def test_iteration_rejects_width_mismatch(rng):
    params = init_params(SMALL, car_classes())
    with pytest.raises(ValueError):
        gnn_iteration(np.zeros((2, 3)), np.zeros((0, 2), int), np.zeros((2, 5)), params.iterations[0])


def test_translation_invariance(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    raw, verts, edges = scene(rng)
    base = forward(params, prepare_sample(raw, verts, edges, 1.0), 1.0)
    t = rng.uniform(-100, 100, 3)
    moved = forward(params, prepare_sample(raw.translated(t), verts.translated(t), edges, 1.0), 1.0)
    assert np.allclose(moved.states[-1], base.states[-1], rtol=1e-6, atol=1e-9)
    assert np.allclose(moved.prediction.deltas, base.prediction.deltas, rtol=1e-6, atol=1e-9)


def test_vertex_permutation_equivariance(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    raw, verts, edges = scene(rng)
    perm = rng.permutation(len(verts))
    inv = np.argsort(perm)
    pverts = verts.subset(perm)
    pedges = inv[edges]
    a = forward(params, prepare_sample(raw, verts, edges, 1.0), 1.0)
    b = forward(params, prepare_sample(raw, pverts, pedges, 1.0), 1.0)
    assert np.allclose(b.prediction.probs, a.prediction.probs[perm], atol=1e-12)


# --- heads and losses ------------------------------------------------------

def test_zero_heads_uniform(rng):
    params = init_params(SMALL, car_classes()).zeros_like()
    pred, _ = predict(rng.normal(size=(5, 8)), params)
    assert np.allclose(pred.probs, 0.25) and np.all(pred.deltas == 0)


def test_predict_matches_affine_softmax(rng):
    params = randomize(init_params(SMALL, car_classes()), rng)
    s = rng.normal(size=(6, 8))
    pred, _ = predict(s, params)
    for i in range(6):
        logits = run_mlp(params.head_cls, s[i])
        p = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(pred.probs[i], p, atol=1e-14)
        assert np.allclose(pred.deltas[i, 1], run_mlp(params.head_loc[1], s[i]), atol=1e-14)
    assert np.allclose(pred.probs.sum(axis=1), 1.0, atol=1e-9)


def test_classification_loss_cases(rng):
    y = np.eye(4)[[0, 2, 1]]
    assert classification_loss(y, y) == 0.0
    assert classification_loss(np.full((3, 4), 0.25), y) == pytest.approx(math.log(4))
    p = rng.dirichlet(np.ones(4), 50)
    lab = np.eye(4)[rng.integers(0, 4, 50)]
    expected = -sum(math.log(p[i, j]) for i in range(50) for j in range(4) if lab[i, j]) / 50
    assert classification_loss(p, lab) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        classification_loss(np.zeros((0, 4)), np.zeros((0, 4)))


def test_classification_loss_clamps_and_weights():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    y = np.eye(2)[[1, 0]]
    assert classification_loss(p, y, [1.0, 0.0]) == pytest.approx(-math.log(1e-12))


def test_localization_loss_cases():
    t = np.zeros((3, 7))
    mask = np.array([True, False, False])
    assert localization_loss(t, t, mask, 3) == 0.0
    assert localization_loss(t + 1, t, np.zeros(3, bool), 3) == 0.0
    d = t.copy()
    d[0, 2] = 0.5
    assert localization_loss(d, t, mask, 3) == pytest.approx(0.5 ** 2 / 2 / 3)
    assert huber(np.array([3.0]))[0] == pytest.approx(2.5)


def test_regularization_and_total(rng):
    params = init_params(SMALL, car_classes()).zeros_like()
    assert regularization_loss(params) == 0.0
    params.embed_point.weights[0][0, 0] = -2.5
    params.embed_point.biases[0][0] = 7.0
    assert regularization_loss(params) == 2.5
    randomize(params, rng)
    assert regularization_loss(params) == pytest.approx(sum(np.abs(w).sum() for w in params.weight_arrays()))
    assert total_loss(1, 1, 1, 0.1, 10, 5e-7) == pytest.approx(10.1000005, abs=1e-12)
    assert total_loss(0, 0, 0, 0.1, 10, 5e-7) == 0.0


def test_end_to_end_gradient_small(rng):
    preset = toy_preset()
    params = init_params(preset.model, preset.classes, 3)
    for it in params.iterations:
        it.mlp_h.weights[-1][...] = rng.normal(0, 0.05, it.mlp_h.weights[-1].shape)
    sample = gradcheck_sample(preset.classes, seed=5)
    assert gradient_check(params, sample, preset.classes, 1.0, LossWeights(), probes=60, seed=1) < 1e-4


# --- full pipeline ---------------------------------------------------------

def test_detect_empty_cloud():
    params = init_params(SMALL, car_classes())
    assert detect(params, car_classes(), PointCloud.empty(), InferenceConfig()) == []


def test_detect_permutation_invariant(rng):
    classes = car_classes()
    params = randomize(init_params(SMALL, classes), rng, 0.5)
    xyz = rng.uniform(0, 15, (400, 3))
    cloud = PointCloud(xyz, rng.uniform(0, 1, 400))
    cfg = InferenceConfig(voxel_mode="centroid-nearest", voxel_size=1.0, radius=2.0)
    a = detect(params, classes, cloud, cfg)
    perm = rng.permutation(400)
    b = detect(params, classes, cloud.subset(perm), cfg)
    assert len(a) == len(b) and len(a) > 0
    key = lambda d: (round(d.score, 9), tuple(np.round(d.box, 6)))
    for da, db in zip(sorted(a, key=key), sorted(b, key=key)):
        assert np.allclose(da.box, db.box, atol=1e-6) and da.score == pytest.approx(db.score, abs=1e-6)
