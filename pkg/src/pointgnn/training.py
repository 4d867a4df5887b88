"""Synthetic scenes, augmentation, learning-rate schedule and the SGD loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxes import (as_box_array, assign_vertex_labels, bev_intersection, box_axes,
                    format_boxes, parse_boxes, points_in_box)
from .classes import CAR_SIZES, ClassSpec
from .errors import GenerationError, TrainingError
from .graph import build_graph, cap_edges
from .model import (LossWeights, PointGnnParams, add_regularization_grad, prepare_sample,
                    regularization_loss, sample_loss_and_grad, total_loss)
from .pointcloud import PointCloud, format_points_text, parse_points_text, voxel_downsample

log = logging.getLogger(__name__)

SENSOR_HEIGHT = 1.73


@dataclass
class Scene:
    cloud: PointCloud
    boxes: np.ndarray
    classes: list

    def __post_init__(self):
        self.boxes = as_box_array(self.boxes)
        if len(self.classes) != len(self.boxes):
            raise ValueError("one class name per box required")


def save_scene(stem, scene: Scene) -> None:
    from .fileio import atomic_write_text
    stem = Path(stem)
    atomic_write_text(stem.with_suffix(".txt"), format_points_text(scene.cloud))
    atomic_write_text(stem.with_suffix(".boxes"), format_boxes(scene.boxes, scene.classes))


def load_scene(stem) -> Scene:
    stem = Path(stem)
    cloud = parse_points_text(stem.with_suffix(".txt").read_text())
    box_path = stem.with_suffix(".boxes")
    if box_path.exists():
        boxes, classes, _ = parse_boxes(box_path.read_text())
    else:
        boxes, classes = np.zeros((0, 7)), []
    return Scene(cloud, boxes, classes)


def load_scene_dir(directory) -> list:
    directory = Path(directory)
    stems = sorted(p.with_suffix("") for p in directory.glob("*.txt"))
    return [load_scene(s) for s in stems], [s.name for s in stems]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    min_boxes: int = 2
    max_boxes: int = 5
    sizes: dict = field(default_factory=lambda: dict(CAR_SIZES))
    size_jitter: float = 0.2
    x_range: tuple = (5.0, 30.0)
    y_range: tuple = (-14.0, 14.0)
    ground_z: float = -SENSOR_HEIGHT
    surface_density: float = 20.0      # points per square meter of visible face
    noise: float = 0.02
    ground_points: int = 120
    poles: int = 3
    placement_attempts: int = 200


def _visible_face_points(box: np.ndarray, density: float, noise: float, rng) -> np.ndarray:
    """Sample the faces whose outward normal points toward the sensor origin."""
    l, h, w = box[3:6]
    axes = box_axes(box[6])
    center = box[:3]
    chunks = []
    # (axis index, sign, extents of the two in-face axes)
    faces = [(0, 1, (1, 2)), (0, -1, (1, 2)), (2, 1, (0, 1)), (2, -1, (0, 1)), (1, 1, (0, 2))]
    dims = np.array([l, h, w])
    for ax, sign, (a1, a2) in faces:
        normal = sign * axes[ax]
        face_center = center + normal * dims[ax] / 2
        if np.dot(normal, -face_center) <= 0:
            continue
        n = rng.poisson(density * dims[a1] * dims[a2])
        local = np.zeros((n, 3))
        local[:, ax] = sign * dims[ax] / 2
        local[:, a1] = rng.uniform(-dims[a1] / 2, dims[a1] / 2, n)
        local[:, a2] = rng.uniform(-dims[a2] / 2, dims[a2] / 2, n)
        if noise > 0:
            local += rng.normal(0.0, noise, local.shape)
        # keep jittered points well inside the 110% box
        lim = 0.5 * 1.09 * dims
        local = np.clip(local, -lim, lim)
        chunks.append(local @ axes + center)
    return np.vstack(chunks) if chunks else np.zeros((0, 3))


def _footprint_clear(candidate: np.ndarray, placed: list, scale: float = 1.25) -> bool:
    grown = candidate.copy()
    grown[3:6] *= scale
    for other in placed:
        o = other.copy()
        o[3:6] *= scale
        if bev_intersection(grown, o) > 0:
            return False
    return True


def generate_synthetic_scene(rng: np.random.Generator, spec: SceneSpec = SceneSpec()) -> Scene:
    """Cuboid objects on a ground plane seen from a sensor at the origin."""
    if spec.min_boxes < 0 or spec.max_boxes < spec.min_boxes:
        raise ValueError("invalid box count range")
    k = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
    names = list(spec.sizes)
    boxes, classes = [], []
    for _ in range(k):
        raw = names[int(rng.integers(len(names)))]
        for _attempt in range(spec.placement_attempts):
            l, h, w = (np.asarray(spec.sizes[raw]) *
                       rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter, 3))
            x = rng.uniform(*spec.x_range)
            y = rng.uniform(*spec.y_range)
            yaw = rng.uniform(-math.pi, math.pi)
            cand = np.array([x, y, spec.ground_z + h / 2, l, h, w, yaw])
            if _footprint_clear(cand, boxes):
                boxes.append(cand)
                classes.append(raw)
                break
        else:
            raise GenerationError(f"could not place box {len(boxes) + 1} of {k}")
    boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 7)

    parts = [_visible_face_points(b, spec.surface_density, spec.noise, rng) for b in boxes_arr]

    n_ground = spec.ground_points
    ground = np.column_stack([rng.uniform(spec.x_range[0] - 3, spec.x_range[1] + 3, n_ground),
                              rng.uniform(spec.y_range[0] - 3, spec.y_range[1] + 3, n_ground),
                              spec.ground_z + rng.normal(0.0, spec.noise, n_ground)])
    for _ in range(spec.poles):
        px = rng.uniform(*spec.x_range)
        py = rng.uniform(*spec.y_range)
        height = rng.uniform(1.5, 3.5)
        n = int(rng.poisson(spec.surface_density * 2 * math.pi * 0.15 * height / 2))
        ang = rng.uniform(-math.pi / 2, math.pi / 2, n) + math.atan2(-py, -px)
        pole = np.column_stack([px + 0.15 * np.cos(ang), py + 0.15 * np.sin(ang),
                                spec.ground_z + rng.uniform(0, height, n)])
        ground = np.vstack([ground, pole])
    # background never intrudes into the inflated object volumes
    clutter_keep = np.ones(len(ground), dtype=bool)
    for b in boxes_arr:
        tall = b.copy()
        tall[4] += 10.0
        clutter_keep &= ~points_in_box(ground, tall, scale=1.1)
    parts.append(ground[clutter_keep])

    xyz = np.vstack(parts) if parts else np.zeros((0, 3))
    intensity = rng.uniform(0.0, 1.0, len(xyz))
    return Scene(PointCloud(xyz, intensity), boxes_arr, classes)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    rotate_std: float = math.pi / 8
    flip: bool = True
    flip_prob: float = 0.5
    translate: bool = True
    translate_std: float = 3.0
    max_attempts: int = 10
    inflate: float = 1.1
    ground_tolerance: float = 0.25

    def disabled(self) -> "AugmentConfig":
        return replace(self, rotate=False, flip=False, translate=False)


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate points and boxes about the vertical axis through the sensor."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    boxes = scene.boxes.copy()
    boxes[:, :3] = boxes[:, :3] @ rot.T
    boxes[:, 6] += angle
    return Scene(PointCloud(scene.cloud.xyz @ rot.T, scene.cloud.intensity), boxes, list(scene.classes))


def flip_scene(scene: Scene) -> Scene:
    """Mirror across the x axis: negate the lateral coordinate and every yaw."""
    xyz = scene.cloud.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    boxes = scene.boxes.copy()
    boxes[:, 1] = -boxes[:, 1]
    boxes[:, 6] = -boxes[:, 6]
    return Scene(PointCloud(xyz, scene.cloud.intensity), boxes, list(scene.classes))


def translate_boxes(scene: Scene, rng: np.random.Generator, cfg: AugmentConfig) -> Scene:
    """Shift each box with the points in its inflated volume along the ground.

    A draw is rejected when the moved box overlaps another box in bird's-eye
    view or when non-ground background points sit in the destination volume;
    after ``max_attempts`` rejections the box stays put. Ground-level
    background points under an accepted destination are dropped.
    """
    xyz = scene.cloud.xyz.copy()
    intensity = scene.cloud.intensity.copy()
    boxes = scene.boxes.copy()
    alive = np.ones(len(xyz), dtype=bool)
    for k in range(len(boxes)):
        own = alive & points_in_box(xyz, boxes[k], cfg.inflate)
        others = [boxes[j] for j in range(len(boxes)) if j != k]
        for _attempt in range(cfg.max_attempts):
            shift = np.array([rng.normal(0.0, cfg.translate_std), rng.normal(0.0, cfg.translate_std), 0.0])
            moved = boxes[k].copy()
            moved[:3] += shift
            if any(bev_intersection(moved, o) > 0 for o in others):
                continue
            dest = alive & ~own & points_in_box(xyz, moved, cfg.inflate)
            bottom = moved[2] - moved[4] / 2
            if np.any(xyz[dest, 2] > bottom + cfg.ground_tolerance):
                continue
            alive &= ~dest
            xyz[own] += shift
            boxes[k] = moved
            break
        else:
            log.debug("box %d: no collision-free translation in %d draws", k, cfg.max_attempts)
    return Scene(PointCloud(xyz[alive], intensity[alive]), boxes, list(scene.classes))


def augment_scene(scene: Scene, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                  angle: float = None) -> Scene:
    """Global yaw rotation, random flip, then per-box translation.

    ``angle`` forces the rotation instead of drawing it.
    """
    out = scene
    if cfg.rotate or angle is not None:
        theta = rng.normal(0.0, cfg.rotate_std) if angle is None else angle
        out = rotate_scene(out, theta)
    if cfg.flip and rng.random() < cfg.flip_prob:
        out = flip_scene(out)
    if cfg.translate and len(out.boxes):
        out = translate_boxes(out, rng, cfg)
    return out


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    loss: LossWeights = LossWeights()
    learning_rate: float = 0.125
    decay_rate: float = 0.1
    decay_steps: int = 400_000
    steps: int = 1000
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    radius: float = 4.0
    r0: float = 1.0
    voxel_size: float = 0.8
    voxel_mode: str = "random"
    max_in_edges: int = 256
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 < self.decay_rate <= 1 or self.decay_steps <= 0:
            raise ValueError("invalid learning-rate schedule")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Staircase decay: ``lr * decay ** floor(step / interval)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.learning_rate * cfg.decay_rate ** (step // cfg.decay_steps)


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place ``p -= lr * g`` over matching names."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    for name, p in params.items():
        p -= lr * grads[name]


def prepare_training_sample(scene: Scene, class_spec: ClassSpec, cfg: TrainConfig, rng: np.random.Generator):
    aug = augment_scene(scene, rng, cfg.augment)
    vd = voxel_downsample(aug.cloud, cfg.voxel_size, cfg.voxel_mode, int(rng.integers(2**31)))
    graph = cap_edges(build_graph(vd.cloud, cfg.radius), cfg.max_in_edges, int(rng.integers(2**31)))
    labels = assign_vertex_labels(vd.cloud.xyz, aug.boxes, aug.classes, class_spec)
    return prepare_sample(aug.cloud, vd.cloud, graph.edges, cfg.r0, labels)


@dataclass
class LossRecord:
    step: int
    l_cls: float
    l_loc: float
    l_reg: float
    total: float
    lr: float


def format_loss_curve(curve) -> str:
    lines = ["step,l_cls,l_loc,l_reg,total,lr"]
    lines += [f"{r.step},{r.l_cls!r},{r.l_loc!r},{r.l_reg!r},{r.total!r},{r.lr!r}" for r in curve]
    return "\n".join(lines) + "\n"


def train(params: PointGnnParams, class_spec: ClassSpec, scenes: list, cfg: TrainConfig,
          checkpoint_fn=None) -> list:
    """Train ``params`` in place; returns the loss curve (one record per step).

    The recorded losses are those of the batch evaluated before the update.
    """
    if not scenes:
        raise ValueError("no training scenes")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.loss
    arrays = params.arrays()
    curve = []
    for step in range(cfg.steps):
        lr = lr_schedule(step, cfg)
        picks = rng.integers(len(scenes), size=cfg.batch_size)
        grads = params.zeros_like()
        l_cls = l_loc = 0.0
        for idx in picks:
            sample = prepare_training_sample(scenes[idx], class_spec, cfg, rng)
            c, l, _, _ = sample_loss_and_grad(params, sample, class_spec, cfg.r0, w, grads,
                                              scale=1.0 / cfg.batch_size)
            l_cls += c / cfg.batch_size
            l_loc += l / cfg.batch_size
        l_reg = regularization_loss(params)
        total = total_loss(l_cls, l_loc, l_reg, w.alpha, w.beta, w.gamma)
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}: cls={l_cls} loc={l_loc} reg={l_reg}")
        curve.append(LossRecord(step, l_cls, l_loc, l_reg, total, lr))
        add_regularization_grad(params, grads, w.gamma)
        sgd_step(arrays, grads.arrays(), lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d total %.4f cls %.4f loc %.4f lr %.4g", step, total, l_cls, l_loc, lr)
        if checkpoint_fn and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(step + 1, params)
    return curve


def gradcheck_sample(class_spec: ClassSpec, n_vertices: int = 20, seed: int = 0, r: float = 4.0,
                     r0: float = 1.0):
    """A small labeled sample (one object, ``n_vertices`` vertices) for
    finite-difference checks. Half the vertices lie on the object."""
    rng = np.random.default_rng(seed)
    raw = next(iter(class_spec.object_classes))
    size = class_spec.constants[class_spec.localized[0]].as_tuple()[:3]
    box = np.array([3.0, 0.5, -0.5, *size, rng.uniform(-0.5, 0.5)])
    local = rng.uniform(-0.45, 0.45, (80, 3)) * box[3:6]
    on_obj = local @ box_axes(box[6]) + box[:3]
    clutter = np.column_stack([rng.uniform(-2, 8, 150), rng.uniform(-4, 4, 150), rng.uniform(-1.5, 1.0, 150)])
    clutter = clutter[~points_in_box(clutter, box, scale=1.2)]
    xyz = np.vstack([on_obj, clutter])
    cloud = PointCloud(xyz, rng.uniform(0, 1, len(xyz)))
    half = n_vertices // 2
    if len(on_obj) < half:
        raise GenerationError("object too sparse for the requested vertex count")
    picks = np.concatenate([rng.choice(len(on_obj), half, replace=False),
                            len(on_obj) + rng.choice(len(clutter), n_vertices - half, replace=False)])
    vertices = cloud.subset(np.sort(picks))
    graph = build_graph(vertices, r)
    labels = assign_vertex_labels(vertices.xyz, box[None], [raw], class_spec)
    return prepare_sample(cloud, vertices, graph.edges, r0, labels)
