"""
Central finite differences on periodic grids.

Stencils are tabulated for derivative orders 1-4 at accuracy 2 and 4 and are
applied with ``np.roll``, so the wrap-around is by index modulo.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import StructuralError

# (order k, accuracy a) -> weights on offsets -r .. r
STENCILS = {
    (1, 2): (-1 / 2, 0.0, 1 / 2),
    (1, 4): (1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12),
    (2, 2): (1.0, -2.0, 1.0),
    (2, 4): (-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12),
    (3, 2): (-1 / 2, 1.0, 0.0, -1.0, 1 / 2),
    (3, 4): (1 / 8, -1.0, 13 / 8, 0.0, -13 / 8, 1.0, -1 / 8),
    (4, 2): (1.0, -4.0, 6.0, -4.0, 1.0),
    (4, 4): (-1 / 6, 2.0, -13 / 2, 28 / 3, -13 / 2, 2.0, -1 / 6),
}

DEFAULT_ACCURACY = 4

# Array axis of each spatial axis for grids stored (y, x)
AXIS_INDEX = {1: {'x': 0}, 2: {'x': 1, 'y': 0}}


@dataclass(frozen=True)
class StencilSpec:
    order: int
    accuracy: int = DEFAULT_ACCURACY
    axis: str = 'x'

    def __post_init__(self):
        if (self.order, self.accuracy) not in STENCILS:
            raise StructuralError(
                f"No central stencil for derivative order {self.order} at accuracy {self.accuracy}")
        if self.axis not in ('x', 'y'):
            raise StructuralError(f"Axis must be 'x' or 'y', got {self.axis!r}")

    @property
    def weights(self) -> Tuple[float, ...]:
        return STENCILS[(self.order, self.accuracy)]

    @property
    def width(self) -> int:
        return len(self.weights)


def stencil_weights(s: StencilSpec) -> np.ndarray:
    return np.array(s.weights)


def derivative(field: np.ndarray, s: StencilSpec, spacing: float) -> np.ndarray:
    """k-th derivative of a periodic grid field along ``s.axis``"""
    field = np.asarray(field, dtype=float)
    axes = AXIS_INDEX.get(field.ndim)
    if axes is None or s.axis not in axes:
        raise StructuralError(f"Cannot differentiate a {field.ndim}-D field along {s.axis}")
    axis = axes[s.axis]
    if field.shape[axis] < s.width:
        raise StructuralError(
            f"Grid of {field.shape[axis]} points is narrower than the {s.width}-point stencil")

    radius = s.width // 2
    result = np.zeros_like(field)
    for offset, weight in zip(range(-radius, radius + 1), s.weights):
        if weight != 0.0:
            # roll by -offset brings field[j + offset] to position j
            result += weight * np.roll(field, -offset, axis=axis)
    return result / spacing ** s.order


def mixed_derivative(field: np.ndarray, order_x: int, order_y: int,
                     accuracy: int, dx: float, dy: float) -> np.ndarray:
    """Cross term d^kx/dx^kx d^ky/dy^ky from the two commuting pure-axis stencils"""
    result = np.asarray(field, dtype=float)
    if order_x:
        result = derivative(result, StencilSpec(order_x, accuracy, 'x'), dx)
    if order_y:
        result = derivative(result, StencilSpec(order_y, accuracy, 'y'), dy)
    return result
