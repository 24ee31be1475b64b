"""Ground-truth generative factors for the toy shape world."""

from __future__ import annotations

import math
from dataclasses import dataclass

# Shape index doubles as the class label. Symmetry order is the number of
# rotations mapping the shape onto itself; 0 marks full rotational symmetry
# (rotation has no visual effect and is ignored by the renderer).
SHAPE_NAMES = ("circle", "square", "triangle", "cross")
# The square's orientation arm breaks its 4-fold body symmetry, so its
# rendered rotation is identifiable over the full turn.
SHAPE_SYMMETRY = {"circle": 0, "square": 1, "triangle": 3, "cross": 4}

FACTOR_RANGES = {
    "rotation": (0.0, 360.0),
    "scale": (0.3, 1.0),
    "hue": (0.0, 360.0),
    "pos_x": (-0.3, 0.3),
    "pos_y": (-0.3, 0.3),
}

CONTINUOUS_FACTORS = ("rotation", "scale", "hue", "pos_x", "pos_y")


@dataclass
class FactorVector:
    """One point in factor space.

    rotation and hue are degrees; pos_x/pos_y are offsets of the shape
    center from the image center, in units of image size (positive pos_y
    moves the shape down).
    """

    shape_class: int
    rotation: float
    scale: float
    hue: float
    pos_x: float
    pos_y: float

    def validate(self, num_classes: int = len(SHAPE_NAMES)) -> None:
        if not (0 <= self.shape_class < num_classes):
            raise ValueError(f"shape_class {self.shape_class} outside [0, {num_classes})")
        for name in CONTINUOUS_FACTORS:
            lo, hi = FACTOR_RANGES[name]
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} is not finite")
            # rotation/hue live on a half-open circle; scale and position
            # include both endpoints.
            if name in ("rotation", "hue"):
                if not (lo <= value < hi):
                    raise ValueError(f"{name}={value} outside [{lo}, {hi})")
            elif not (lo <= value <= hi):
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    def folded_rotation(self) -> float:
        """Rotation reduced modulo the shape's symmetry, in degrees.

        Circles fold to 0. math.fmod on representable inputs is exact, so
        rotations differing by an exact symmetry step fold bit-identically.
        """
        order = SHAPE_SYMMETRY[SHAPE_NAMES[self.shape_class]]
        if order == 0:
            return 0.0
        period = 360.0 / order
        folded = math.fmod(self.rotation, period)
        if folded < 0:
            folded += period
        return folded

    def as_dict(self) -> dict:
        return {
            "shape_class": self.shape_class,
            "rotation": self.rotation,
            "scale": self.scale,
            "hue": self.hue,
            "pos_x": self.pos_x,
            "pos_y": self.pos_y,
        }
