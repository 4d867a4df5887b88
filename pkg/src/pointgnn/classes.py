"""Class layouts and the per-class box encoding constants."""
from __future__ import annotations

import math
from dataclasses import dataclass

BACKGROUND = "Background"
DONT_CARE = "DoNotCare"


@dataclass(frozen=True)
class BoxConstants:
    """Scale factors of the box encoding: median size, yaw offset and yaw scale."""

    l_m: float
    h_m: float
    w_m: float
    theta0: float
    theta_m: float

    def __post_init__(self):
        if min(self.l_m, self.h_m, self.w_m) <= 0 or self.theta_m <= 0:
            raise ValueError(f"box constants must be positive: {self}")

    def as_tuple(self):
        return (self.l_m, self.h_m, self.w_m, self.theta0, self.theta_m)


@dataclass(frozen=True)
class ClassSpec:
    """Ordered prediction classes.

    ``names[0]`` is Background and ``names[-1]`` is DoNotCare; everything in
    between is a localized view-subclass of a raw object class, e.g.
    ``Car_side`` (yaw bin around 0) and ``Car_front`` (yaw bin around pi/2).
    """

    names: tuple
    raw_classes: tuple          # raw object class per name (None for Background/DoNotCare)
    constants: tuple            # BoxConstants per name (None for Background/DoNotCare)

    def __post_init__(self):
        if self.names[0] != BACKGROUND or self.names[-1] != DONT_CARE:
            raise ValueError("class list must start with Background and end with DoNotCare")
        for name, c in zip(self.names, self.constants):
            if (name in (BACKGROUND, DONT_CARE)) != (c is None):
                raise ValueError(f"class {name}: localization constants mismatch")

    @classmethod
    def from_sizes(cls, sizes: dict, theta_m: float = math.pi / 2) -> "ClassSpec":
        """Build side/front subclasses for each raw class from its median (l, h, w)."""
        names, raws, consts = [BACKGROUND], [None], [None]
        for raw, (l, h, w) in sizes.items():
            for view, theta0 in (("side", 0.0), ("front", math.pi / 2)):
                names.append(f"{raw}_{view}")
                raws.append(raw)
                consts.append(BoxConstants(l, h, w, theta0, theta_m))
        names.append(DONT_CARE)
        raws.append(None)
        consts.append(None)
        return cls(tuple(names), tuple(raws), tuple(consts))

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def background(self) -> int:
        return 0

    @property
    def dont_care(self) -> int:
        return len(self.names) - 1

    @property
    def localized(self) -> tuple:
        return tuple(range(1, len(self.names) - 1))

    @property
    def object_classes(self) -> tuple:
        seen = []
        for r in self.raw_classes:
            if r is not None and r not in seen:
                seen.append(r)
        return tuple(seen)

    def loc_slot(self, class_index: int) -> int:
        """Index of a localized class among the localization heads."""
        if class_index not in self.localized:
            raise ValueError(f"class {self.names[class_index]} is not localized")
        return class_index - 1

    def subclass_for(self, raw_class: str, yaw: float) -> int:
        """Class index for a ground-truth box of ``raw_class`` with ``yaw``.

        Unknown raw classes map to DoNotCare.
        """
        from .boxes import normalize_yaw
        if raw_class == DONT_CARE or raw_class not in self.raw_classes:
            return self.dont_care
        view = "side" if normalize_yaw(yaw) < math.pi / 4 else "front"
        return self.names.index(f"{raw_class}_{view}")


CAR_SIZES = {"Car": (3.88, 1.5, 1.63)}
PEDCYC_SIZES = {"Pedestrian": (0.88, 1.77, 0.65), "Cyclist": (1.76, 1.75, 0.6)}


def car_classes() -> ClassSpec:
    return ClassSpec.from_sizes(CAR_SIZES)


def pedcyc_classes() -> ClassSpec:
    return ClassSpec.from_sizes(PEDCYC_SIZES)
