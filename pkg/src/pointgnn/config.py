"""Named presets and the key=value config file.

``car`` and ``pedcyc`` follow the published KITTI settings; ``toy`` keeps
the Car geometry but shrinks every width to 64 and uses two iterations so a
run fits on a desktop CPU.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace

from .classes import ClassSpec, car_classes, pedcyc_classes
from .errors import FormatError
from .fileio import format_key_values, parse_key_values
from .model import InferenceConfig, LossWeights, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Preset:
    name: str
    classes: ClassSpec
    model: ModelConfig
    train: TrainConfig
    infer: InferenceConfig


def car_preset() -> Preset:
    model = ModelConfig(state_dim=300, embed_units=(32, 64, 128, 300), post_units=(300, 300),
                        f_units=(300, 300), g_units=(300, 300), h_units=(64, 3), cls_hidden=(64,),
                        loc_units=(64, 64, 7), iterations=3)
    train = TrainConfig(batch_size=4, loss=LossWeights(0.1, 10.0, 5e-7), learning_rate=0.125,
                        decay_rate=0.1, decay_steps=400_000, steps=1_400_000, radius=4.0, r0=1.0,
                        voxel_size=0.8, max_in_edges=256)
    infer = InferenceConfig(radius=4.0, r0=1.0, voxel_size=0.4, nms_threshold=0.01)
    return Preset("car", car_classes(), model, train, infer)


def pedcyc_preset() -> Preset:
    model = ModelConfig(state_dim=256, embed_units=(32, 64, 128, 256, 512), post_units=(256, 256),
                        f_units=(256, 256), g_units=(256, 256), h_units=(64, 3), cls_hidden=(64,),
                        loc_units=(64, 64, 7), iterations=3)
    train = TrainConfig(batch_size=4, loss=LossWeights(0.1, 10.0, 5e-7), learning_rate=0.32,
                        decay_rate=0.25, decay_steps=400_000, steps=1_000_000, radius=1.6, r0=0.4,
                        voxel_size=0.4, max_in_edges=256)
    infer = InferenceConfig(radius=1.6, r0=0.4, voxel_size=0.2, nms_threshold=0.2)
    return Preset("pedcyc", pedcyc_classes(), model, train, infer)


def toy_preset() -> Preset:
    model = ModelConfig(state_dim=64, embed_units=(32, 64), post_units=(64, 64), f_units=(64, 64),
                        g_units=(64, 64), h_units=(64, 3), cls_hidden=(64,), loc_units=(64, 64, 7),
                        iterations=2)
    # the published alpha=0.1 leaves the classifier near the class prior after
    # a few thousand steps; alpha=1 lets it learn within the toy budget
    train = TrainConfig(batch_size=2, loss=LossWeights(1.0, 10.0, 5e-7), learning_rate=0.05,
                        decay_rate=0.1, decay_steps=2000, steps=3000, radius=4.0, r0=1.0,
                        voxel_size=0.8, max_in_edges=256)
    infer = InferenceConfig(radius=4.0, r0=1.0, voxel_size=0.4, nms_threshold=0.01)
    return Preset("toy", car_classes(), model, train, infer)


PRESETS = {"car": car_preset, "pedcyc": pedcyc_preset, "toy": toy_preset}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# key=value config files
#
# Keys are ``section.field``, sections being ``model``, ``train``, ``loss``,
# ``augment`` and ``infer``; e.g. ``train.steps=500`` or ``model.iterations=0``.


def _convert(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "on", "yes"):
            return True
        if value.lower() in ("0", "false", "off", "no"):
            return False
        raise FormatError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if value.lower() == "none":
        return None
    if current is None:
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
        if value.lower() in ("true", "false", "on", "off"):
            return value.lower() in ("true", "on")
        return value
    return value


def _set(obj, key: str, value: str):
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise FormatError(f"unknown key {key!r} for {type(obj).__name__}")
    try:
        return replace(obj, **{key: _convert(value, getattr(obj, key))})
    except ValueError as exc:
        raise FormatError(f"{key}: {exc}") from None


def apply_overrides(preset: Preset, values: dict) -> Preset:
    model, train, infer = preset.model, preset.train, preset.infer
    for full_key, value in values.items():
        section, _, key = full_key.partition(".")
        if section == "model":
            model = _set(model, key, value)
        elif section == "train":
            train = _set(train, key, value)
        elif section == "loss":
            train = replace(train, loss=_set(train.loss, key, value))
        elif section == "augment":
            train = replace(train, augment=_set(train.augment, key, value))
        elif section == "infer":
            infer = _set(infer, key, value)
        else:
            raise FormatError(f"unknown config section in {full_key!r}")
    return replace(preset, model=model, train=train, infer=infer)


def load_config(path, preset: Preset) -> Preset:
    from pathlib import Path
    return apply_overrides(preset, parse_key_values(Path(path).read_text()))


def flatten(preset: Preset) -> dict:
    out = {"preset": preset.name}
    for section, obj in (("model", preset.model), ("train", preset.train), ("infer", preset.infer)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                sub = "loss" if isinstance(v, LossWeights) else "augment"
                for g in fields(v):
                    out[f"{sub}.{g.name}"] = getattr(v, g.name)
            else:
                out[f"{section}.{f.name}"] = " ".join(map(str, v)) if isinstance(v, tuple) else v
    return out


def manifest_text(preset: Preset) -> str:
    values = flatten(preset)
    for c, name in enumerate(preset.classes.names):
        const = preset.classes.constants[c]
        values[f"class.{c}"] = name if const is None else f"{name} " + " ".join(f"{v!r}" for v in const.as_tuple())
    return format_key_values(values)


def preset_from_manifest(text: str) -> Preset:
    values = parse_key_values(text)
    preset = get_preset(values.pop("preset", "toy"))
    sizes, theta_m = {}, None
    for key in sorted((k for k in values if k.startswith("class.")), key=lambda k: int(k.split(".")[1])):
        parts = values.pop(key).split()
        if len(parts) == 6:
            raw = parts[0].rsplit("_", 1)[0]
            sizes.setdefault(raw, tuple(float(v) for v in parts[1:4]))
            theta_m = float(parts[5])
    if sizes:
        preset = replace(preset, classes=ClassSpec.from_sizes(sizes, theta_m))
    return apply_overrides(preset, values)
