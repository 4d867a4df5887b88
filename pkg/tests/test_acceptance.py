"""Acceptance suite: one PASS/FAIL line per headline criterion.

The lines are collected by the ``acceptance`` fixture and printed in the
"acceptance criteria" section at the end of the pytest run. The toy
training criteria share one module-scoped training run (about ten minutes
on one core); the rest are oracle checks that take seconds.
"""
import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from pointgnn.boxes import bev_iou, box_axes, decode_boxes, encode_boxes, normalize_yaw, occlusion_factor
from pointgnn.classes import car_classes
from pointgnn.config import get_preset
from pointgnn.eval import average_precision, evaluate_detector, match_detections
from pointgnn.graph import brute_force_edges, build_graph
from pointgnn.model import forward, gradient_check, init_params, prepare_sample
from pointgnn.pointcloud import PointCloud, scanline_downsample, voxel_downsample
from pointgnn.postprocess import merge_score_nms
from pointgnn.training import generate_synthetic_scene, gradcheck_sample, train

TOY = get_preset("toy")


def _random_params(rng, scale=0.3):
    params = init_params(TOY.model, TOY.classes, 0)
    for arr in params.arrays().values():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    return params


def _toy_graph_sample(rng):
    scene = generate_synthetic_scene(rng)
    vd = voxel_downsample(scene.cloud, TOY.infer.voxel_size, "random", int(rng.integers(1000)))
    graph = build_graph(vd.cloud, TOY.infer.radius)
    return scene.cloud, vd.cloud, graph.edges


# --- graph -----------------------------------------------------------------

def test_graph_matches_brute_force(acceptance):
    rng = np.random.default_rng(100)
    build = check = 0.0
    mismatches = 0
    for _ in range(100):
        xyz = rng.uniform(0.0, 30.0, (int(rng.integers(1000, 3001)), 3))
        t0 = time.perf_counter()
        got = build_graph(PointCloud(xyz, np.zeros(len(xyz))), 4.0).edges
        t1 = time.perf_counter()
        mismatches += not np.array_equal(got, brute_force_edges(xyz, 4.0))
        build += t1 - t0
        check += time.perf_counter() - t1
    ok = acceptance("graph oracle", mismatches == 0 and build < 60.0,
                    f"{100 - mismatches}/100 clouds identical to brute force; build_graph {build:.1f} s "
                    f"(< 60 s), brute-force oracle {check:.1f} s")
    assert ok


# --- gradients -------------------------------------------------------------

def test_gradient_integrity(acceptance):
    t0 = time.perf_counter()
    params = init_params(TOY.model, TOY.classes, 0)
    rng = np.random.default_rng(1)
    for it in params.iterations:
        it.mlp_h.weights[-1][...] = rng.normal(0.0, 0.05, it.mlp_h.weights[-1].shape)
    sample = gradcheck_sample(TOY.classes, 20, 0, TOY.train.radius, TOY.train.r0)
    assert len(sample.xyz) == 20 and params.T == 2
    err = gradient_check(params, sample, TOY.classes, TOY.train.r0, TOY.train.loss, probes=500, seed=0)
    elapsed = time.perf_counter() - t0
    ok = acceptance("gradient integrity", err < 1e-4 and elapsed < 300.0,
                    f"max relative error {err:.2e} over 500 probes (< 1e-4) in {elapsed:.1f} s (< 300 s)")
    assert ok


# --- auto-registration -----------------------------------------------------

def test_zero_offset_layer_reduces_to_plain_update(acceptance):
    rng = np.random.default_rng(2)
    equal = 0
    for _ in range(20):
        params = _random_params(rng)
        for it in params.iterations:
            it.mlp_h.weights[-1][...] = 0.0
            it.mlp_h.biases[-1][...] = 0.0
        raw, verts, edges = _toy_graph_sample(rng)
        sample = prepare_sample(raw, verts, edges, TOY.infer.r0)
        on = forward(params, sample, TOY.infer.r0, auto_registration=True)
        off = forward(params, sample, TOY.infer.r0, auto_registration=False)
        same = all(np.array_equal(a, b) for a, b in zip(on.states, off.states))
        same &= np.array_equal(on.prediction.probs, off.prediction.probs)
        same &= np.array_equal(on.prediction.deltas, off.prediction.deltas)
        equal += bool(same)
    ok = acceptance("registration reduction", equal == 20, f"{equal}/20 scenes bitwise equal with and without offsets")
    assert ok


def test_translation_invariance(acceptance):
    rng = np.random.default_rng(3)
    params = _random_params(rng, 0.1)
    raw, verts, edges = _toy_graph_sample(rng)
    base = forward(params, prepare_sample(raw, verts, edges, TOY.infer.r0), TOY.infer.r0)
    ref = [base.states[-1], base.prediction.probs, base.prediction.deltas.reshape(len(verts), -1)]
    worst = 0.0
    for _ in range(20):
        direction = rng.normal(size=3)
        t = direction / np.linalg.norm(direction) * rng.uniform(0.0, 100.0)
        moved = forward(params, prepare_sample(raw.translated(t), verts.translated(t), edges, TOY.infer.r0),
                        TOY.infer.r0)
        got = [moved.states[-1], moved.prediction.probs, moved.prediction.deltas.reshape(len(verts), -1)]
        for a, b in zip(got, ref):
            scale = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
            worst = max(worst, float((np.linalg.norm(a - b, axis=1) / scale).max()))
    ok = acceptance("translation invariance", worst <= 1e-6,
                    f"max per-vertex relative deviation {worst:.2e} over 20 shifts up to 100 m (<= 1e-6)")
    assert ok


# --- box codec -------------------------------------------------------------

def test_box_codec_round_trip(acceptance):
    rng = np.random.default_rng(4)
    spec = car_classes()
    n = 100_000
    consts = np.array([spec.constants[c].as_tuple() for c in rng.integers(1, 3, n)])
    assert np.allclose(consts[:, :3], [3.88, 1.5, 1.63])
    verts = rng.uniform(-40, 40, (n, 3))
    boxes = np.column_stack([verts + rng.normal(0, 3, (n, 3)), rng.uniform(0.5, 6, (n, 3)),
                             normalize_yaw(rng.uniform(-math.pi, math.pi, n))])
    back = decode_boxes(encode_boxes(boxes, verts, consts), verts, consts)
    err = float(np.abs(back - boxes).max())
    ok = acceptance("box codec", err < 1e-9, f"max error {err:.2e} over 1e5 round trips (< 1e-9)")
    assert ok


# --- merging and scoring NMS -----------------------------------------------

def _transliterated_nms(boxes, scores, th, points):
    """Line-by-line rendering of the published pseudo-code with plain lists."""
    B = [list(map(float, b)) for b in boxes]
    D = [float(d) for d in scores]
    M, Z = [], []
    while B:
        i = 0
        for k in range(1, len(D)):
            if D[k] > D[i]:
                i = k
        bi = B[i]
        L, LD, keepB, keepD = [], [], [], []
        for bj, dj in zip(B, D):
            if bev_iou(bi, bj) > th:
                L.append(bj)
                LD.append(dj)
            else:
                keepB.append(bj)
                keepD.append(dj)
        B, D = keepB, keepD
        m = [statistics.median(b[c] for b in L) for c in range(6)]
        m.append(statistics.median(((b[6] + math.pi / 4) % math.pi) - math.pi / 4 for b in L))
        o = _occlusion_by_loops(m, points)
        z = (o + 1.0) * sum(bev_iou(m, bk) * dk for bk, dk in zip(L, LD))
        M.append(m)
        Z.append(z)
    return M, Z


def _occlusion_by_loops(box, points):
    x, y, z, l, h, w, yaw = box
    axes = [(math.cos(yaw), math.sin(yaw), 0.0), (0.0, 0.0, 1.0), (-math.sin(yaw), math.cos(yaw), 0.0)]
    half = (l / 2, h / 2, w / 2)
    lo, hi, count = [math.inf] * 3, [-math.inf] * 3, 0
    for p in points:
        local = [sum(a * (pc - bc) for a, pc, bc in zip(ax, p, (x, y, z))) for ax in axes]
        if all(abs(c) <= e + 1e-9 for c, e in zip(local, half)):
            count += 1
            for k, ax in enumerate(axes):
                v = sum(a * pc for a, pc in zip(ax, p))
                lo[k], hi[k] = min(lo[k], v), max(hi[k], v)
    if count < 2:
        return 0.0
    return min(max((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]) / (l * h * w), 0.0), 1.0)


def test_merge_score_nms_matches_transliteration(acceptance):
    rng = np.random.default_rng(5)
    worst_box = worst_score = 0.0
    count_mismatch = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        centers = rng.uniform(-25, 25, (int(rng.integers(1, 6)), 2))
        g = rng.integers(0, len(centers), n)
        boxes = np.column_stack([centers[g] + rng.normal(0, 0.7, (n, 2)), rng.normal(-1, 0.1, n),
                                 rng.uniform(3, 4.5, n), rng.uniform(1.3, 1.7, n), rng.uniform(1.4, 1.9, n),
                                 rng.normal(0.2, 0.4, n)])
        scores = rng.uniform(0, 1, n)
        pts = np.column_stack([centers[rng.integers(0, len(centers), 40)] + rng.uniform(-2.5, 2.5, (40, 2)),
                               rng.uniform(-1.9, -0.1, 40)])
        th = float(rng.choice([0.01, 0.1, 0.3]))
        m, z = merge_score_nms(boxes, scores, th, pts)
        m2, z2 = _transliterated_nms(boxes, scores, th, pts)
        if len(m) != len(m2):
            count_mismatch += 1
            continue
        worst_box = max(worst_box, float(np.abs(m - np.array(m2)).max()))
        worst_score = max(worst_score, float(np.abs(z - np.array(z2)).max()))
    ok = count_mismatch == 0 and worst_box <= 1e-12 and worst_score <= 1e-12
    acceptance("merge+score NMS oracle", ok,
               f"{1000 - count_mismatch}/1000 sets same length; max box diff {worst_box:.1e}, "
               f"max score diff {worst_score:.1e} (<= 1e-12)")
    assert ok


# --- occlusion factor ------------------------------------------------------

def test_occlusion_factor_cases(acceptance):
    rng = np.random.default_rng(6)
    b = np.array([1.0, -2.0, 0.5, 4.0, 1.5, 1.7, 0.6])
    corners = np.array([[-2.0, -0.75, -0.85], [2.0, 0.75, 0.85]])
    corner_pair = occlusion_factor(b, corners @ box_axes(b[6]) + b[:3])
    single = occlusion_factor(b, b[None, :3])
    worst = 0.0
    for _ in range(1000):
        box = np.r_[rng.uniform(-10, 10, 3), rng.uniform(1, 4, 3), rng.uniform(-math.pi, math.pi)]
        pts = box[:3] + rng.uniform(-2.5, 2.5, (30, 3))
        ang, t = rng.uniform(-math.pi, math.pi), rng.uniform(-50, 50, 3)
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        moved = box.copy()
        moved[:3] = rot @ box[:3] + t
        moved[6] += ang
        worst = max(worst, abs(occlusion_factor(moved, pts @ rot.T + t) - occlusion_factor(box, pts)))
    ok = abs(corner_pair - 1.0) < 1e-12 and single == 0.0 and worst <= 1e-9
    acceptance("occlusion factor", ok,
               f"corner pair {corner_pair:.12f} (1), single point {single} (0), "
               f"rigid-motion deviation {worst:.1e} over 1000 cases (<= 1e-9)")
    assert ok


# --- AP harness ------------------------------------------------------------

def test_ap_harness_cases(acceptance):
    box = [0.0, 0.0, 0.0, 4.0, 1.5, 1.6, 0.0]
    far = [30.0, 0.0, 0.0, 4.0, 1.5, 1.6, 0.0]
    gts = (np.array([box]), ["Car"])
    perfect = average_precision(match_detections((np.array([box]), ["Car"], [0.9]), gts))
    all_fp = average_precision(match_detections((np.array([far, far]), ["Car"] * 2, [0.9, 0.5]), gts))
    half = average_precision(match_detections((np.array([far, box]), ["Car"] * 2, [0.9, 0.4]), gts))
    ok = (perfect, all_fp, half) == (1.0, 0.0, 0.5)
    acceptance("AP harness", ok, f"perfect {perfect}, all false positives {all_fp}, late match {half} (1, 0, 0.5)")
    assert ok


# --- toy training reproduction ---------------------------------------------

TRAIN_SCENES = 100
VAL_SCENES = 40


@pytest.fixture(scope="module")
def toy_run():
    rng = np.random.default_rng(0)
    scenes = [generate_synthetic_scene(rng) for _ in range(TRAIN_SCENES)]
    cfg = replace(TOY.train, log_every=0)
    assert TOY.model.iterations == 2 and cfg.steps == 3000
    params = init_params(TOY.model, TOY.classes, cfg.seed)
    t0 = time.perf_counter()
    curve = train(params, TOY.classes, scenes, cfg)
    seconds = time.perf_counter() - t0
    return {"scenes": scenes, "params": params, "curve": curve, "seconds": seconds}


def _car_ap(params, preset, scenes, **infer):
    cfg = replace(preset.infer, **infer)
    (res,) = evaluate_detector(params, preset.classes, scenes, cfg, threshold=0.5)
    return res.ap


@pytest.mark.slow
def test_toy_training_loss_and_runtime(toy_run, acceptance):
    totals = np.array([r.total for r in toy_run["curve"]])
    final = float(totals[-100:].mean())
    ratio = final / totals[0]
    ok_loss = acceptance("toy training loss", ratio < 0.30,
                         f"final (mean of last 100 steps) {final:.4f} / step-0 {totals[0]:.4f} = {ratio:.3f} (< 0.30)")
    ok_time = acceptance("toy training runtime", toy_run["seconds"] < 1200,
                         f"3000 steps in {toy_run['seconds'] / 60:.1f} min (< 20 min)")
    assert ok_loss and ok_time


@pytest.mark.slow
def test_toy_training_ap_and_nms_direction(toy_run, acceptance):
    ap_ms = _car_ap(toy_run["params"], TOY, toy_run["scenes"], nms_mode="merge+score")
    ap_std = _car_ap(toy_run["params"], TOY, toy_run["scenes"], nms_mode="standard")
    toy_run["ap"] = ap_ms
    ok_ap = acceptance("toy training-set 3D AP", ap_ms >= 0.80, f"AP@0.5 {ap_ms:.4f} (>= 0.80)")
    ok_nms = acceptance("merge+score vs standard NMS", ap_ms >= ap_std - 0.02,
                        f"{ap_ms:.4f} vs {ap_std:.4f} (>= standard - 0.02)")
    assert ok_ap and ok_nms


@pytest.mark.slow
def test_toy_iterations_help(toy_run, acceptance):
    preset = replace(TOY, model=replace(TOY.model, iterations=0))
    params = init_params(preset.model, preset.classes, preset.train.seed)
    train(params, preset.classes, toy_run["scenes"], replace(preset.train, log_every=0))
    ap0 = _car_ap(params, preset, toy_run["scenes"])
    ap2 = toy_run.get("ap")
    if ap2 is None:
        ap2 = _car_ap(toy_run["params"], TOY, toy_run["scenes"])
    ok = acceptance("T=2 vs T=0", ap2 >= ap0 + 0.10, f"AP {ap2:.4f} (T=2) vs {ap0:.4f} (T=0) (>= T=0 + 0.10)")
    assert ok


@pytest.mark.slow
def test_sparsity_trend(toy_run, acceptance):
    rng = np.random.default_rng(2024)
    val = [generate_synthetic_scene(rng) for _ in range(VAL_SCENES)]
    aps = {}
    for lines in (64, 32, 16, 8):
        thinned = [replace(s, cloud=scanline_downsample(s.cloud, 64, lines)) for s in val]
        aps[lines] = _car_ap(toy_run["params"], TOY, thinned)
    seq = [aps[k] for k in (64, 32, 16, 8)]
    ok = seq[-1] <= seq[0] and all(b <= a + 0.02 for a, b in zip(seq, seq[1:]))
    acceptance("sparsity trend", ok, "AP at 64/32/16/8 lines " + " / ".join(f"{a:.4f}" for a in seq)
               + " (non-increasing within 0.02, 8 <= 64)")
    assert ok
