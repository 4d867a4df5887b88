"""Greedy detection matching and interpolated average precision."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .boxes import as_box_array, iou_3d, points_in_box

# Minimum gt point counts for the synthetic stand-ins of the easy / moderate /
# hard tiers. Tiers are nested: a harder tier keeps every easier gt.
DIFFICULTY_MIN_POINTS = {"easy": 100, "moderate": 30, "hard": 5}


@dataclass
class EvalRecord:
    """Per-detection outcome of matching one scene (or several, concatenated).

    ``ignored`` marks detections that landed on a gt excluded from the
    evaluation (e.g. outside the difficulty tier); they count as neither true
    nor false positives.
    """

    scores: np.ndarray
    matched: np.ndarray
    ignored: np.ndarray
    scene_ids: np.ndarray
    num_gt: int

    @property
    def num_det(self) -> int:
        return int((~self.ignored).sum())

    @classmethod
    def concat(cls, records) -> "EvalRecord":
        records = list(records)
        if not records:
            return cls(np.zeros(0), np.zeros(0, bool), np.zeros(0, bool), np.zeros(0, np.int64), 0)
        return cls(np.concatenate([r.scores for r in records]),
                   np.concatenate([r.matched for r in records]),
                   np.concatenate([r.ignored for r in records]),
                   np.concatenate([r.scene_ids for r in records]),
                   sum(r.num_gt for r in records))


def _unpack(items, with_scores: bool):
    boxes = as_box_array(items[0])
    classes = list(items[1])
    scores = None
    if with_scores:
        scores = np.asarray(items[2], dtype=np.float64).reshape(-1)
        if len(scores) != len(boxes):
            raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(classes) != len(boxes):
        raise ValueError(f"{len(boxes)} boxes but {len(classes)} class names")
    return boxes, classes, scores


def match_detections(dets, gts, iou_fn=iou_3d, threshold: float = 0.5, class_name=None,
                     gt_ignore=None, scene_id: int = 0) -> EvalRecord:
    """Greedy matching of one scene.

    ``dets`` is ``(boxes, classes, scores)``, ``gts`` is ``(boxes, classes)``.
    Detections are visited by descending score (lowest index on ties); each
    takes the highest-IoU unmatched gt of its class with IoU >= ``threshold``
    (lowest gt index on ties). Only class ``class_name`` is scored when given.
    A detection whose only candidates are ignored gts is marked ignored.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    d_boxes, d_classes, d_scores = _unpack(dets, True)
    g_boxes, g_classes, _ = _unpack(gts, False)
    ignore = np.zeros(len(g_boxes), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)

    d_keep = [k for k, c in enumerate(d_classes) if class_name is None or c == class_name]
    g_keep = [k for k, c in enumerate(g_classes) if class_name is None or c == class_name]
    order = sorted(d_keep, key=lambda k: (-d_scores[k], k))
    taken = np.zeros(len(g_boxes), bool)
    matched = np.zeros(len(order), bool)
    ignored = np.zeros(len(order), bool)
    for pos, k in enumerate(order):
        best = {False: (-1.0, -1), True: (-1.0, -1)}
        for g in g_keep:
            if taken[g] or g_classes[g] != d_classes[k]:
                continue
            iou = iou_fn(d_boxes[k], g_boxes[g])
            if iou >= threshold and iou > best[bool(ignore[g])][0]:
                best[bool(ignore[g])] = (iou, g)
        if best[False][1] >= 0:
            taken[best[False][1]] = True
            matched[pos] = True
        elif best[True][1] >= 0:
            taken[best[True][1]] = True
            ignored[pos] = True
    num_gt = sum(1 for g in g_keep if not ignore[g])
    return EvalRecord(d_scores[order] if order else np.zeros(0), matched, ignored,
                      np.full(len(order), scene_id, dtype=np.int64), num_gt)


def precision_recall(record: EvalRecord):
    """Precision and recall after each detection of the global score sweep."""
    keep = ~record.ignored
    scores, matched = record.scores[keep], record.matched[keep]
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(matched[order])
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / record.num_gt
    return precision, recall


def average_precision(records, points: int = 40) -> float:
    """Interpolated AP over ``records`` (one EvalRecord or an iterable of them).

    ``points=40`` samples recall at 1/40..40/40; ``points=11`` uses the older
    0, 0.1, ..., 1 grid. Precision is first made non-increasing in recall.
    """
    record = records if isinstance(records, EvalRecord) else EvalRecord.concat(records)
    if record.num_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth box")
    if points == 40:
        grid = np.arange(1, 41) / 40.0
    elif points == 11:
        grid = np.linspace(0.0, 1.0, 11)
    else:
        raise ValueError(f"points must be 40 or 11, got {points}")
    precision, recall = precision_recall(record)
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # first sweep position whose recall reaches each sample
    pos = np.searchsorted(recall, grid - 1e-12, side="left")
    ok = pos < len(recall)
    sampled = np.where(ok, envelope[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def gt_point_counts(gt_boxes, points: np.ndarray) -> np.ndarray:
    return np.array([int(points_in_box(points, b).sum()) for b in as_box_array(gt_boxes)], dtype=np.int64)


def difficulty_ignore(point_counts: np.ndarray, tier: str, thresholds=None) -> np.ndarray:
    """Mask of gts excluded from ``tier`` (too few points)."""
    thresholds = DIFFICULTY_MIN_POINTS if thresholds is None else thresholds
    if tier not in thresholds:
        raise ValueError(f"unknown difficulty {tier!r}; choose from {sorted(thresholds)}")
    return np.asarray(point_counts) < thresholds[tier]


@dataclass
class ApResult:
    class_name: str
    iou_threshold: float
    ap: float
    num_gt: int
    num_det: int


def evaluate(scene_dets, scene_gts, class_name: str, iou_fn=iou_3d, threshold: float = 0.5,
             points: int = 40, scene_ignores=None) -> ApResult:
    """AP of ``class_name`` over paired per-scene detections and gts.

    The AP is NaN when no gt of the class is present.
    """
    if len(scene_dets) != len(scene_gts):
        raise ValueError(f"{len(scene_dets)} detection sets but {len(scene_gts)} gt sets")
    ignores = scene_ignores if scene_ignores is not None else [None] * len(scene_gts)
    records = [match_detections(d, g, iou_fn, threshold, class_name, ig, scene_id=s)
               for s, (d, g, ig) in enumerate(zip(scene_dets, scene_gts, ignores))]
    rec = EvalRecord.concat(records)
    ap = average_precision(rec, points) if rec.num_gt > 0 else float("nan")
    return ApResult(class_name, threshold, ap, rec.num_gt, rec.num_det)


REPORT_FIELDS = ("class", "iou_threshold", "ap", "num_gt", "num_det")


def format_report(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in results:
        w.writerow([r.class_name, f"{r.iou_threshold:g}", f"{r.ap:.6f}", r.num_gt, r.num_det])
    return buf.getvalue()


def parse_report(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != REPORT_FIELDS:
        raise ValueError(f"unexpected report header {tuple(rows[0].keys())}")
    return [ApResult(r["class"], float(r["iou_threshold"]), float(r["ap"]), int(r["num_gt"]), int(r["num_det"]))
            for r in rows]


def evaluate_detector(params, class_spec, scenes, infer_cfg, threshold: float = 0.5, iou_fn=iou_3d,
                      points: int = 40, difficulty: str = None) -> list:
    """Run detection on each scene and score every object class.

    ``scenes`` are objects with ``cloud``, ``boxes`` and ``classes``. With
    ``difficulty`` set, gts outside that point-count tier are ignored.
    """
    from .model import detect

    scene_dets, scene_gts, ignores = [], [], []
    for scene in scenes:
        dets = detect(params, class_spec, scene.cloud, infer_cfg)
        scene_dets.append((np.array([d.box for d in dets]).reshape(-1, 7),
                           [d.class_name for d in dets], [d.score for d in dets]))
        scene_gts.append((scene.boxes, scene.classes))
        if difficulty is not None:
            ignores.append(difficulty_ignore(gt_point_counts(scene.boxes, scene.cloud.xyz), difficulty))
    return [evaluate(scene_dets, scene_gts, name, iou_fn, threshold, points,
                     ignores if difficulty is not None else None)
            for name in class_spec.object_classes]
