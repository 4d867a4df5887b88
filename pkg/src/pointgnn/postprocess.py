"""NMS with box merging and occlusion-aware scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_box_array, bev_iou, normalize_yaw, occlusion_factor

MODES = ("merge+score", "merge-only", "score-only", "standard")


@dataclass
class DetectionCluster:
    seed: int
    members: list
    box: np.ndarray
    score: float


def median_box(cluster) -> np.ndarray:
    """Component-wise median of centers and sizes; yaw is the median of
    half-turn-normalized yaws."""
    boxes = as_box_array(cluster)
    if len(boxes) == 0:
        raise ValueError("median of an empty cluster")
    out = np.median(boxes[:, :6], axis=0)
    return np.append(out, np.median(normalize_yaw(boxes[:, 6])))


def nms_clusters(boxes, scores, threshold: float, points=None, mode: str = "merge+score",
                 iou_fn=bev_iou, seed_yaw: bool = False) -> list:
    """Run the greedy clustering loop and return one DetectionCluster per output box.

    ``seed_yaw`` keeps the seed box's yaw on merged boxes instead of the median.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if mode not in MODES:
        raise ValueError(f"unknown NMS mode {mode!r}")
    merge = mode in ("merge+score", "merge-only")
    rescore = mode in ("merge+score", "score-only")
    points = np.zeros((0, 3)) if points is None else points

    remaining = list(range(len(boxes)))
    clusters = []
    while remaining:
        # first maximum among remaining, i.e. lowest index on ties
        seed = max(remaining, key=lambda k: (scores[k], -k))
        members, rest = [], []
        for j in remaining:
            (members if iou_fn(boxes[seed], boxes[j]) > threshold else rest).append(j)
        if not members:
            # only reachable if the seed fails to overlap itself (threshold 1 with rounding)
            members = [seed]
            rest = [j for j in remaining if j != seed]
        remaining = rest
        m = median_box(boxes[members]) if merge else boxes[seed].copy()
        if merge and seed_yaw:
            m[6] = boxes[seed, 6]
        if rescore:
            o = occlusion_factor(m, points)
            z = (o + 1.0) * sum(iou_fn(m, boxes[k]) * scores[k] for k in members)
        else:
            z = float(scores[members].max())
        clusters.append(DetectionCluster(seed, members, m, float(z)))
    return clusters


def merge_score_nms(boxes, scores, threshold: float, points=None, mode: str = "merge+score",
                    iou_fn=bev_iou, seed_yaw: bool = False):
    """Return merged boxes (K, 7) and their scores (K,), in selection order."""
    clusters = nms_clusters(boxes, scores, threshold, points, mode, iou_fn, seed_yaw)
    merged = np.array([c.box for c in clusters], dtype=np.float64).reshape(-1, 7)
    return merged, np.array([c.score for c in clusters], dtype=np.float64)
