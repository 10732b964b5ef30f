"""Method-of-lines stencils for the advective derivative along one pipe.

A pipe with ``n`` grid points has the inlet value ``T_1`` (an algebraic
unknown) and ``n - 1`` interior/outlet values ``T_2..T_n`` (differential).
The spatial derivative at the interior/outlet points is approximated by::

    dT/dx ~ scale * (inlet * T_1 + matrix @ T[2:])

with integer stencil coefficients and ``scale = 1 / (denominator * dx)``.
Boundary rows of the wide stencils use quadratic ghost-point extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import SizeError, UnknownOrderError

MIN_POINTS = {1: 2, 2: 3, 3: 4}
_DENOMINATOR = {1: 1.0, 2: 2.0, 3: 6.0}


@dataclass(frozen=True)
class SpatialScheme:
    order: int = 1

    def __post_init__(self):
        if self.order not in MIN_POINTS:
            raise UnknownOrderError(f"spatial order must be 1, 2 or 3, got {self.order!r}")

    @property
    def min_points(self) -> int:
        return MIN_POINTS[self.order]


@dataclass(frozen=True)
class AdvectionBlock:
    order: int
    matrix: np.ndarray
    inlet: np.ndarray
    scale: float

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, inlet_value: float, values: np.ndarray) -> np.ndarray:
        """Approximate ``dT/dx`` at the non-inlet grid points."""
        return self.scale * (self.inlet * inlet_value + self.matrix @ values)


def grid_spacing(length: float, n_points: int) -> float:
    """Spacing of ``n_points`` equidistant nodes covering ``[0, length]``."""
    if not length > 0:
        raise SizeError(f"length must be positive, got {length}")
    if int(n_points) != n_points or n_points < 2:
        raise SizeError(f"need at least 2 grid points, got {n_points}")
    return length / (n_points - 1)


def advection_block(scheme: SpatialScheme | int, n_points: int, dx: float = 1.0) -> AdvectionBlock:
    if not isinstance(scheme, SpatialScheme):
        scheme = SpatialScheme(scheme)
    order = scheme.order
    if n_points < scheme.min_points:
        raise SizeError(f"order {order} needs at least {scheme.min_points} grid points, got {n_points}")
    m = n_points - 1
    a = np.zeros((m, m))
    d = np.zeros(m)
    if order == 1:
        a[np.arange(m), np.arange(m)] = 1.0
        a[np.arange(1, m), np.arange(m - 1)] = -1.0
        d[0] = -1.0
    elif order == 2:
        # central rows; outlet row from linear ghost extrapolation
        for j in range(m - 1):
            a[j, j + 1] = 1.0
            if j == 0:
                d[0] = -1.0
            else:
                a[j, j - 1] = -1.0
        a[m - 1, m - 2] = -2.0
        a[m - 1, m - 1] = 2.0
    else:
        # first row: ghost T_{-1} = 3 T_0 - 3 T_1 + T_2 folded into the stencil
        d[0] = -3.0
        a[0, 1] = 3.0
        for j in range(1, m - 1):
            for offset, coef in zip((-2, -1, 0, 1), (1.0, -6.0, 3.0, 2.0)):
                col = j + offset
                if col < 0:
                    d[j] += coef
                else:
                    a[j, col] += coef
        a[m - 1, m - 3] = 3.0
        a[m - 1, m - 2] = -12.0
        a[m - 1, m - 1] = 9.0
    return AdvectionBlock(order, a, d, 1.0 / (_DENOMINATOR[order] * dx))
