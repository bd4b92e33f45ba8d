"""Bounded physical parameters and the (0, 1) <-> physical mapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, apply


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lower: float
    upper: float
    calibrated: bool = True
    default: float | None = None  # value used when not calibrated

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower bound {self.lower} must be < upper {self.upper}")
        if self.default is not None and not self.lower <= self.default <= self.upper:
            raise ValueError(f"{self.name}: default {self.default} outside bounds")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def fixed_value(self) -> float:
        return self.default if self.default is not None else 0.5 * (self.lower + self.upper)

    def to_dict(self) -> dict:
        return {"name": self.name, "lower": self.lower, "upper": self.upper,
                "calibrated": self.calibrated, "default": self.default}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpec":
        return cls(d["name"], float(d["lower"]), float(d["upper"]),
                   bool(d.get("calibrated", True)), d.get("default"))


def calibrated(specs: Sequence[ParamSpec]) -> list[ParamSpec]:
    return [s for s in specs if s.calibrated]


def bounds_array(specs: Sequence[ParamSpec]) -> np.ndarray:
    """``(k, 2)`` array of ``[lower, upper]`` rows."""
    return np.array([[s.lower, s.upper] for s in specs], dtype=np.float64)


def descale(raw, specs: Sequence[ParamSpec]):
    """Map raw values in [0, 1] (last axis = parameter) to physical units.

    Works on Tensors (differentiable) and plain arrays alike.
    ``physical = lower + raw * (upper - lower)``.
    """
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    if data.shape[-1] != len(specs):
        raise ValueError(f"descale: last axis has {data.shape[-1]} values, expected {len(specs)}")
    if np.any(data < 0.0) or np.any(data > 1.0) or not np.isfinite(data).all():
        raise ValueError("descale: raw values must lie in [0, 1]")
    b = bounds_array(specs)
    lo, width = b[:, 0], b[:, 1] - b[:, 0]
    if isinstance(raw, Tensor):
        return apply("add", apply("mul", raw, width), lo)
    return lo + data * width


def rescale(physical, specs: Sequence[ParamSpec]) -> np.ndarray:
    """Inverse of :func:`descale` for plain arrays."""
    b = bounds_array(specs)
    return (np.asarray(physical, dtype=np.float64) - b[:, 0]) / (b[:, 1] - b[:, 0])


def expand(calibrated_values, specs: Sequence[ParamSpec]):
    """Column list of the full parameter vector, fixed entries filled with defaults.

    ``calibrated_values`` has the calibrated parameters on its last axis (in
    spec order).  Returns a list with one entry per spec: a column of the
    input for calibrated parameters, a float for the fixed ones.
    """
    cols = []
    j = 0
    for s in specs:
        if s.calibrated:
            cols.append(calibrated_values[..., j])
            j += 1
        else:
            cols.append(s.fixed_value)
    return cols


def full_matrix(calibrated_values: np.ndarray, specs: Sequence[ParamSpec]) -> np.ndarray:
    """Plain-array version of :func:`expand` returning ``(..., len(specs))``."""
    calibrated_values = np.asarray(calibrated_values, dtype=np.float64)
    shape = calibrated_values.shape[:-1]
    return np.stack([np.broadcast_to(c, shape) for c in expand(calibrated_values, specs)], axis=-1)
