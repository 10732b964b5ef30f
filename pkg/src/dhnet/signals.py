"""Time-dependent boundary data: constants, sampled series and closed forms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import OutOfRangeError

# relative slack when checking the sampled range, absorbs rounding in t
_RANGE_SLACK = 1e-12


class Signal:
    """Scalar function of time with a right-derivative and a list of kinks."""

    def __call__(self, t: float) -> float:
        raise NotImplementedError

    def derivative(self, t: float) -> float:
        raise NotImplementedError

    @property
    def knots(self) -> np.ndarray:
        """Times where the signal is not smooth."""
        return np.empty(0)

    def covers(self, t0: float, tf: float) -> bool:
        return True


@dataclass(frozen=True)
class Constant(Signal):
    value: float

    def __call__(self, t):
        return float(self.value)

    def derivative(self, t):
        return 0.0


@dataclass(frozen=True, eq=False)
class TimeSeries(Signal):
    """Piecewise-linear interpolant of strictly increasing samples.

    Evaluation outside ``[times[0], times[-1]]`` raises
    :class:`~dhnet.exceptions.OutOfRangeError`.  The derivative at a knot is
    the slope of the segment to its right (left segment at the last sample).
    """

    times: np.ndarray
    values: np.ndarray
    _slopes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.size == 0:
            raise ValueError("time series needs at least one sample")
        if times.shape != values.shape:
            raise ValueError("times and values differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("time series contains non-finite entries")
        slopes = np.diff(values) / np.diff(times) if times.size > 1 else np.zeros(1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_slopes", slopes)

    def _check(self, t):
        lo, hi = self.times[0], self.times[-1]
        slack = _RANGE_SLACK * max(1.0, abs(lo), abs(hi))
        if t < lo - slack or t > hi + slack:
            raise OutOfRangeError(f"t={t!r} outside sampled range [{lo}, {hi}]")

    def __call__(self, t):
        self._check(t)
        return float(np.interp(t, self.times, self.values))

    def derivative(self, t):
        self._check(t)
        if self.times.size == 1:
            return 0.0
        seg = np.searchsorted(self.times, t, side="right") - 1
        seg = min(max(seg, 0), self._slopes.size - 1)
        return float(self._slopes[seg])

    @property
    def knots(self):
        return self.times.copy()

    def covers(self, t0, tf):
        slack = _RANGE_SLACK * max(1.0, abs(t0), abs(tf))
        return self.times[0] <= t0 + slack and self.times[-1] >= tf - slack

    def __eq__(self, other):
        return (
            isinstance(other, TimeSeries)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Analytic(Signal):
    """Closed-form signal, used by the manufactured verification case."""

    func: Callable[[float], float]
    dfunc: Callable[[float], float]
    name: str = "analytic"

    def __call__(self, t):
        return float(self.func(t))

    def derivative(self, t):
        return float(self.dfunc(t))


def as_signal(value) -> Signal:
    """Coerce a number, ``(times, values)`` pair or Signal into a Signal."""
    if isinstance(value, Signal):
        return value
    if np.isscalar(value):
        return Constant(float(value))
    times, values = value
    return TimeSeries(np.asarray(times, float), np.asarray(values, float))


def collect_knots(signals, t0: float, tf: float) -> np.ndarray:
    """Sorted unique knot times strictly inside ``(t0, tf)``."""
    knots = [s.knots for s in signals]
    if not knots:
        return np.empty(0)
    allk = np.unique(np.concatenate(knots))
    return allk[(allk > t0) & (allk < tf)]
