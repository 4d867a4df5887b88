"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on bad input data.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .boxes import bev_iou, format_boxes, iou_3d
from .config import Preset, get_preset, load_config, manifest_text, preset_from_manifest
from .errors import FormatError, PointGnnError
from .eval import evaluate_detector, format_report
from .fileio import atomic_write_text
from .graph import brute_force_edges, build_graph, format_graph
from .model import PointGnnParams, detect, forward, gradient_check, init_params, prepare_sample
from .nn import load_checkpoint, save_checkpoint
from .pointcloud import read_points, scanline_downsample, voxel_downsample
from .training import (format_loss_curve, generate_synthetic_scene, gradcheck_sample, load_scene,
                       load_scene_dir, save_scene, train)

log = logging.getLogger("pointgnn")

MODEL_FILE = "model.ckpt"
MANIFEST_FILE = "manifest.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# model directories


def save_model(directory, params: PointGnnParams, preset: Preset) -> None:
    directory = Path(directory)
    save_checkpoint(directory / MODEL_FILE, params.arrays())
    atomic_write_text(directory / MANIFEST_FILE, manifest_text(preset))


def load_model(directory):
    directory = Path(directory)
    if not (directory / MANIFEST_FILE).exists():
        raise FormatError(f"{directory} has no {MANIFEST_FILE}")
    preset = preset_from_manifest((directory / MANIFEST_FILE).read_text())
    params = init_params(preset.model, preset.classes)
    try:
        params.load_arrays(load_checkpoint(directory / MODEL_FILE))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not fit the manifest: {exc}") from None
    return params, preset


def _preset(args) -> Preset:
    preset = get_preset(args.preset)
    if args.config:
        preset = load_config(args.config, preset)
    return preset


def _scenes(path):
    path = Path(path)
    if path.is_dir():
        scenes, names = load_scene_dir(path)
        if not scenes:
            raise FormatError(f"no scenes (*.txt) in {path}")
        return scenes, names
    return [load_scene(path.with_suffix(""))], [path.stem]


def _emit(text: str, output) -> None:
    if output:
        atomic_write_text(output, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.output)
    for k in range(args.scenes):
        save_scene(out / f"scene_{k:04d}", generate_synthetic_scene(rng))
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def cmd_graph(args) -> int:
    cloud = read_points(args.input)
    if args.voxel:
        cloud = voxel_downsample(cloud, args.voxel, "centroid", args.seed).cloud
    t0 = time.perf_counter()
    graph = build_graph(cloud, args.radius)
    elapsed = time.perf_counter() - t0
    deg = graph.in_degree()
    print(f"vertices {graph.num_vertices} edges {graph.num_edges} "
          f"mean_degree {deg.mean() if len(deg) else 0.0:.3f} max_degree {deg.max() if len(deg) else 0} "
          f"build_seconds {elapsed:.4f}")
    if args.oracle:
        if np.array_equal(brute_force_edges(cloud.xyz, args.radius), graph.edges):
            print("MATCH")
        else:
            print("MISMATCH")
            return 2
    if args.dump:
        atomic_write_text(args.dump, format_graph(graph))
    return 0


def cmd_train(args) -> int:
    preset = _preset(args)
    cfg = preset.train
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    preset = replace(preset, train=cfg)
    scenes, _ = _scenes(args.input)
    params = init_params(preset.model, preset.classes, cfg.seed)
    out = Path(args.output)

    def checkpoint(step, p):
        save_checkpoint(out / f"step_{step:07d}.ckpt", p.arrays())

    curve = train(params, preset.classes, scenes, cfg, checkpoint)
    save_model(out, params, preset)
    atomic_write_text(out / "loss_curve.csv", format_loss_curve(curve))
    print(f"trained {cfg.steps} steps; loss {curve[0].total:.4f} -> {curve[-1].total:.4f}")
    return 0


def cmd_infer(args) -> int:
    params, preset = load_model(args.model)
    cfg = preset.infer if args.seed is None else replace(preset.infer, seed=args.seed)
    scenes, names = _scenes(args.input)
    out = Path(args.output)
    for scene, name in zip(scenes, names):
        dets = detect(params, preset.classes, scene.cloud, cfg)
        text = format_boxes(np.array([d.box for d in dets]).reshape(-1, 7), [d.class_name for d in dets],
                            [d.score for d in dets])
        target = out / f"{name}.boxes" if len(scenes) > 1 or out.suffix != ".boxes" else out
        atomic_write_text(target, text)
    print(f"wrote detections for {len(scenes)} scene(s) to {out}")
    return 0


def _evaluate(args, params, preset, infer_cfg, scenes):
    iou_fn = bev_iou if args.bev else iou_3d
    return evaluate_detector(params, preset.classes, scenes, infer_cfg, args.iou, iou_fn,
                             args.points, args.difficulty)


def cmd_eval(args) -> int:
    params, preset = load_model(args.model)
    scenes, _ = _scenes(args.input)
    _emit(format_report(_evaluate(args, params, preset, preset.infer, scenes)), args.output)
    return 0


def _on_off(key: str, value: str) -> bool:
    if value.lower() in ("on", "true", "1"):
        return True
    if value.lower() in ("off", "false", "0"):
        return False
    raise UsageError(f"--toggle {key} expects on/off, got {value!r}")


def cmd_ablate(args) -> int:
    params, preset = load_model(args.model)
    cfg = preset.infer
    merge, score = True, True
    for item in args.toggle:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--toggle expects key=value, got {item!r}")
        if key == "auto_reg":
            cfg = replace(cfg, auto_registration=_on_off(key, value))
        elif key == "merge":
            merge = _on_off(key, value)
        elif key == "score":
            score = _on_off(key, value)
        elif key == "T":
            try:
                t = int(value)
            except ValueError:
                raise UsageError(f"--toggle T expects an integer, got {value!r}") from None
            if not 0 <= t <= params.T:
                raise UsageError(f"--toggle T must be in [0, {params.T}]")
            cfg = replace(cfg, iterations=t)
        else:
            raise UsageError(f"unknown toggle {key!r}; choose from auto_reg, merge, score, T")
    mode = {(True, True): "merge+score", (True, False): "merge-only",
            (False, True): "score-only", (False, False): "standard"}[(merge, score)]
    cfg = replace(cfg, nms_mode=mode)
    scenes, _ = _scenes(args.input)
    _emit(format_report(_evaluate(args, params, preset, cfg, scenes)), args.output)
    return 0


def cmd_sparsity(args) -> int:
    params, preset = load_model(args.model)
    scenes, _ = _scenes(args.input)
    lines = ["lines,class,iou_threshold,ap,num_gt,num_det"]
    for n_lines in args.lines:
        thinned = [replace(s, cloud=scanline_downsample(s.cloud, 64, n_lines, seed=args.seed or 0))
                   for s in scenes]
        for row in format_report(_evaluate(args, params, preset, preset.infer, thinned)).splitlines()[1:]:
            lines.append(f"{n_lines},{row}")
    _emit("\n".join(lines) + "\n", args.output)
    return 0


def cmd_bench(args) -> int:
    preset = _preset(args)
    seed = 0 if args.seed is None else args.seed
    if args.input:
        cloud = read_points(args.input)
    else:
        cloud = generate_synthetic_scene(np.random.default_rng(seed)).cloud
    cfg = preset.infer
    params = init_params(preset.model, preset.classes, seed)
    timings = {"downsample": [], "graph": [], "forward": []}
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        vd = voxel_downsample(cloud, cfg.voxel_size, cfg.voxel_mode, seed)
        t1 = time.perf_counter()
        graph = build_graph(vd.cloud, cfg.radius)
        t2 = time.perf_counter()
        forward(params, prepare_sample(cloud, vd.cloud, graph.edges, cfg.r0), cfg.r0)
        t3 = time.perf_counter()
        timings["downsample"].append(t1 - t0)
        timings["graph"].append(t2 - t1)
        timings["forward"].append(t3 - t2)
    print(f"points {len(cloud)} vertices {graph.num_vertices} edges {graph.num_edges}")
    for stage, ts in timings.items():
        print(f"{stage} median_seconds {np.median(ts):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    preset = _preset(args)
    model = replace(preset.model, iterations=args.iterations)
    seed = 0 if args.seed is None else args.seed
    params = init_params(model, preset.classes, seed)
    rng = np.random.default_rng(seed + 1)
    # give the registration offsets a nonzero start so their gradient path is exercised
    for it in params.iterations:
        it.mlp_h.weights[-1][...] = rng.normal(0.0, 0.05, it.mlp_h.weights[-1].shape)
    sample = gradcheck_sample(preset.classes, args.vertices, seed, preset.train.radius, preset.train.r0)
    err = gradient_check(params, sample, preset.classes, preset.train.r0, preset.train.loss, args.probes, seed)
    verdict = "PASS" if err < args.tolerance else "FAIL"
    print(f"probes {args.probes} max_relative_error {err:.3e} {verdict}")
    return 0 if verdict == "PASS" else 2


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", default="toy", choices=["car", "pedcyc", "toy"])
    common.add_argument("--config", help="key=value overrides (e.g. train.steps=500)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    evalopts = _Parser(add_help=False)
    evalopts.add_argument("--model", required=True, help="directory written by `train`")
    evalopts.add_argument("--input", required=True, help="scene stem/file or directory of scenes")
    evalopts.add_argument("--output", help="CSV report path (default: stdout)")
    evalopts.add_argument("--iou", type=float, default=0.5)
    evalopts.add_argument("--bev", action="store_true", help="bird's-eye-view IoU instead of 3D")
    evalopts.add_argument("--points", type=int, default=40, choices=[40, 11])
    evalopts.add_argument("--difficulty", choices=["easy", "moderate", "hard"])

    parser = _Parser(prog="pointgnn", description="Graph neural network 3D object detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graph", parents=[common], help="build a fixed-radius graph")
    p.add_argument("--input", required=True)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--voxel", type=float, default=0.0, help="voxel size; 0 keeps every point")
    p.add_argument("--oracle", action="store_true", help="compare against brute force")
    p.add_argument("--dump", help="write the edge list here")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--input", required=True, help="directory of scenes")
    p.add_argument("--output", required=True, help="model directory")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="detect objects")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help=".boxes file or directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common, evalopts], help="average precision report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, evalopts], help="evaluate with components switched off")
    p.add_argument("--toggle", action="append", default=[], metavar="KEY=VALUE",
                   help="auto_reg=on|off, merge=on|off, score=on|off, T=<int>")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sparsity", parents=[common, evalopts], help="AP under scan-line downsampling")
    p.add_argument("--lines", type=int, nargs="+", default=[64, 32, 16, 8], choices=[64, 32, 16, 8])
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("bench", parents=[common], help="time graph construction and the forward pass")
    p.add_argument("--input")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--probes", type=int, default=500)
    p.add_argument("--vertices", type=int, default=20)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (PointGnnError, ValueError, OSError) as exc:
        print(f"pointgnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
