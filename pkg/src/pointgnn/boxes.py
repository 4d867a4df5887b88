"""Oriented 3D box geometry.

A box is ``(x, y, z, l, h, w, yaw)``: center, length along the heading,
height along z, width across the heading, and yaw about the vertical axis.
Array-valued helpers take boxes as (n, 7) float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classes import BoxConstants, ClassSpec
from .errors import FormatError
from .pointcloud import PointCloud


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    h: float
    w: float
    yaw: float

    def __post_init__(self):
        if min(self.l, self.h, self.w) <= 0:
            raise ValueError(f"box sizes must be positive: {self}")

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        return cls(*(float(v) for v in np.asarray(arr, dtype=np.float64).reshape(7)))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.h, self.w, self.yaw])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.h * self.w


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box3D):
        return boxes.to_array()[None]
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 7)
    return np.array([b.to_array() if isinstance(b, Box3D) else b for b in boxes],
                    dtype=np.float64).reshape(-1, 7)


def normalize_yaw(yaw):
    """Map yaw into [-pi/4, 3pi/4); boxes are symmetric under a half turn."""
    return np.mod(np.asarray(yaw, dtype=np.float64) + math.pi / 4, math.pi) - math.pi / 4


def encode_boxes(boxes: np.ndarray, vertices: np.ndarray, constants: np.ndarray) -> np.ndarray:
    """Vectorized encoding; ``constants`` rows are (l_m, h_m, w_m, theta0, theta_m)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    c = np.broadcast_to(np.asarray(constants, dtype=np.float64), (len(boxes), 5))
    if np.any(boxes[:, 3:6] <= 0):
        raise ValueError("box sizes must be positive")
    out = np.empty((len(boxes), 7))
    out[:, 0:3] = (boxes[:, 0:3] - vertices) / c[:, 0:3]
    out[:, 3:6] = np.log(boxes[:, 3:6] / c[:, 0:3])
    out[:, 6] = (normalize_yaw(boxes[:, 6]) - c[:, 3]) / c[:, 4]
    return out


def decode_boxes(encoded: np.ndarray, vertices: np.ndarray, constants: np.ndarray) -> np.ndarray:
    encoded = np.asarray(encoded, dtype=np.float64).reshape(-1, 7)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    c = np.broadcast_to(np.asarray(constants, dtype=np.float64), (len(encoded), 5))
    out = np.empty((len(encoded), 7))
    out[:, 0:3] = encoded[:, 0:3] * c[:, 0:3] + vertices
    out[:, 3:6] = c[:, 0:3] * np.exp(encoded[:, 3:6])
    out[:, 6] = encoded[:, 6] * c[:, 4] + c[:, 3]
    return out


def encode_box(box: Box3D, vertex, constants: BoxConstants) -> np.ndarray:
    return encode_boxes(box.to_array(), vertex, constants.as_tuple())[0]


def decode_box(encoded, vertex, constants: BoxConstants) -> Box3D:
    return Box3D.from_array(decode_boxes(encoded, vertex, constants.as_tuple())[0])


def box_axes(yaw: float) -> np.ndarray:
    """Rows are the unit length, height and width directions."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s, 0.0], [0.0, 0.0, 1.0], [-s, c, 0.0]])


def to_box_frame(points: np.ndarray, box) -> np.ndarray:
    """Coordinates along (length, height, width) relative to the box center."""
    b = as_box_array(box)[0]
    return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - b[:3]) @ box_axes(b[6]).T


# slack on the inclusive boundary so points placed exactly on a face survive
# the rounding of the frame rotation
CONTAIN_TOL = 1e-9


def points_in_box(points: np.ndarray, box, scale: float = 1.0) -> np.ndarray:
    """Inclusive containment mask; ``scale`` inflates every dimension."""
    b = as_box_array(box)[0]
    local = to_box_frame(points, b)
    half = 0.5 * scale * b[3:6] + CONTAIN_TOL
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(p, box) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[None], box)[0])


def bev_corners(box) -> np.ndarray:
    """Footprint corners in counter-clockwise order, shape (4, 2)."""
    b = as_box_array(box)[0]
    c, s = math.cos(b[6]), math.sin(b[6])
    hl, hw = b[3] / 2, b[5] / 2
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + b[:2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not output:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a, b) -> float:
    a = as_box_array(a)[0]
    b = as_box_array(b)[0]
    reach = 0.5 * (math.hypot(a[3], a[5]) + math.hypot(b[3], b[5]))
    if (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 >= reach * reach:
        return 0.0
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


def bev_iou(a, b) -> float:
    """IoU of the yaw-rotated footprints in the horizontal plane."""
    a = as_box_array(a)[0]
    b = as_box_array(b)[0]
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[5] + b[3] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b) -> float:
    a = as_box_array(a)[0]
    b = as_box_array(b)[0]
    dz = min(a[2] + a[4] / 2, b[2] + b[4] / 2) - max(a[2] - a[4] / 2, b[2] - b[4] / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def occlusion_factor(box, points) -> float:
    """Product of the contained points' extents along the box axes over the box volume."""
    b = as_box_array(box)[0]
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = xyz[points_in_box(xyz, b)]
    if len(inside) < 2:
        return 0.0
    proj = inside @ box_axes(b[6]).T
    extent = proj.max(axis=0) - proj.min(axis=0)
    o = float(np.prod(extent) / (b[3] * b[4] * b[5]))
    return min(max(o, 0.0), 1.0)


@dataclass
class VertexLabels:
    """Per-vertex supervision: class index, encoded target and source box.

    ``targets`` rows and ``box_ids`` are only meaningful where ``has_target``.
    """

    classes: np.ndarray
    targets: np.ndarray
    box_ids: np.ndarray

    @property
    def has_target(self) -> np.ndarray:
        return self.box_ids >= 0


def assign_vertex_labels(vertices: np.ndarray, gt_boxes, gt_classes, class_spec: ClassSpec) -> VertexLabels:
    """Label each vertex with the smallest ground-truth box that contains it."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    boxes = as_box_array(gt_boxes)
    n = len(vertices)
    classes = np.full(n, class_spec.background, dtype=np.int64)
    targets = np.zeros((n, 7))
    box_ids = np.full(n, -1, dtype=np.int64)
    best_volume = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    for k, b in enumerate(boxes):
        inside = points_in_box(vertices, b)
        vol = b[3] * b[4] * b[5]
        take = inside & (vol < best_volume)
        owner[take] = k
        best_volume[take] = vol
    for k, b in enumerate(boxes):
        sel = owner == k
        if not sel.any():
            continue
        cls = class_spec.subclass_for(gt_classes[k], b[6])
        classes[sel] = cls
        const = class_spec.constants[cls]
        if const is not None:
            targets[sel] = encode_boxes(np.repeat(b[None], sel.sum(), axis=0), vertices[sel], const.as_tuple())
            box_ids[sel] = k
    return VertexLabels(classes, targets, box_ids)


def format_boxes(boxes, classes, scores=None) -> str:
    boxes = as_box_array(boxes)
    lines = []
    for k, b in enumerate(boxes.tolist()):
        fields = [classes[k]] + [f"{v:.6f}" for v in b]
        if scores is not None:
            fields.append(f"{float(scores[k]):.6f}")
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def parse_boxes(text: str):
    """Parse ``class x y z l h w yaw [score]`` lines into (boxes, classes, scores).

    ``scores`` is None when no line carries one.
    """
    boxes, classes, scores = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (8, 9):
            raise FormatError(f"line {lineno}: expected 8 or 9 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals) or min(vals[3:6]) <= 0:
            raise FormatError(f"line {lineno}: invalid box values")
        classes.append(parts[0])
        boxes.append(vals[:7])
        scores.append(vals[7] if len(vals) == 8 else None)
    arr = np.array(boxes, dtype=np.float64).reshape(-1, 7)
    if any(s is None for s in scores) or not scores:
        return arr, classes, None
    return arr, classes, np.array(scores)
