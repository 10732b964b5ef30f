"""Variable-step BDF (orders 1 and 2) for implicit DAEs ``F(t, z, z') = 0``.

The method follows the quasi-constant step-size formulation with a backward
difference array ``D`` (as in scipy's BDF): a step of order ``k`` predicts
``z_pred = sum(D[:k+1])`` and solves::

    F(t_new, z_pred + d, (psi + d) / c) = 0,    c = h / alpha_k

for the correction ``d`` by a simplified Newton iteration with the matrix
``dF/dz + dF/dz' / c``.  The local error is ``d / (k + 1)`` measured in the
weighted RMS norm over the differential components.

Any object exposing ``size``, ``differential`` (bool mask),
``residual(t, z, zdot)``, ``jacobian(t, z, zdot) -> (F_z, F_zdot)`` and
``knots(t0, tf)`` can be integrated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import InconsistentStart, NewtonDivergence, SingularMatrixError, StepUnderflow

MAX_ORDER = 2
NEWTON_MAXITER = 4
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
SAFETY = 0.9
_EPS = np.finfo(float).eps

# coefficients of the BDF formulas in backward-difference form
_GAMMA = np.array([0.0, 1.0, 1.5])
_ALPHA = _GAMMA
_ERROR_CONST = 1.0 / np.arange(1, MAX_ORDER + 3)


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and step controls.

    ``atol`` may be a scalar or one value per component.  ``fixed_step``
    switches off error control and steps with the given size (rounded so the
    interval is covered by equal steps).
    """

    rtol: float = 1e-4
    atol: float | np.ndarray = 1e-6
    first_step: float | None = None
    max_step: float = np.inf
    min_step: float = 1e-14
    max_newton: int = NEWTON_MAXITER
    max_order: int = MAX_ORDER
    exclude_algebraic: bool = True
    fixed_step: float | None = None
    consistency_tol: float = 1e-6
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not self.rtol > 0 or np.any(np.asarray(self.atol) <= 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_order not in (1, 2):
            raise ValueError("max_order must be 1 or 2")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise ValueError("fixed_step must be positive")


@dataclass
class StepStats:
    h: float
    order: int
    newton_iters: int
    error_norm: float


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    stats: list[StepStats]
    restarts: list[int]
    n_rejected: int = 0
    n_jac: int = 0
    n_lu: int = 0
    counters: dict = field(default_factory=dict)

    def sol(self, t):
        """Dense output: order-``k`` Lagrange interpolation within each step.

        The polynomial of the step ending at ``t_{n+1}`` passes through the
        last ``k + 1`` accepted points, never reaching back across a restart.
        """
        scalar = np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((ts.size, self.states.shape[1]))
        times = self.times
        span = max(1.0, abs(times[-1]))
        for m, tm in enumerate(ts):
            if tm < times[0] - 1e-12 * span or tm > times[-1] + 1e-12 * span:
                raise ValueError(f"t={tm} outside the integrated interval")
            n = int(np.clip(np.searchsorted(times, tm, side="left"), 1, times.size - 1))
            if times[n - 1] == tm:
                out[m] = self.states[n - 1]
                continue
            order = self.stats[n - 1].order
            first = max(n - order, self._segment_start(n))
            nodes = np.arange(first, n + 1)
            out[m] = _lagrange(times[nodes], self.states[nodes], tm)
        return out[0] if scalar else out

    def _segment_start(self, n: int) -> int:
        start = 0
        for r in self.restarts:
            if r < n:
                start = r
        return start


def _lagrange(xs, ys, x):
    w = np.ones(xs.size)
    for i in range(xs.size):
        for j in range(xs.size):
            if i != j:
                w[i] *= (x - xs[j]) / (xs[i] - xs[j])
    return w @ ys


def _compute_R(order, factor):
    I = np.arange(1, order + 1)[:, None]
    J = np.arange(1, order + 1)
    M = np.zeros((order + 1, order + 1))
    M[1:, 1:] = (I - 1 - factor * J) / I
    M[0] = 1
    return np.cumprod(M, axis=0)


def _change_D(D, order, factor):
    """Rescale the difference array for a new step ``h * factor``."""
    RU = _compute_R(order, factor) @ _compute_R(order, 1)
    D[: order + 1] = RU.T @ D[: order + 1]


def _rms(x) -> float:
    return float(np.linalg.norm(x) / np.sqrt(x.size)) if x.size else 0.0


@dataclass
class StepOutcome:
    accepted: bool
    converged: bool
    t: float
    z: np.ndarray | None
    zdot: np.ndarray | None
    d: np.ndarray | None
    error_norm: float
    newton_iters: int
    h: float
    order: int


class BdfStepper:
    """Mutable BDF state: difference array, step size, order and factorisation."""

    def __init__(self, system, t0: float, z0, zdot0, h: float, config: IntegratorConfig):
        self.system = system
        self.config = config
        self.t = float(t0)
        z0 = np.asarray(z0, dtype=float)
        self.n = z0.size
        self.atol = np.broadcast_to(np.asarray(config.atol, dtype=float), (self.n,)).copy()
        self.rtol = config.rtol
        mask = np.asarray(system.differential, dtype=bool)
        self.err_mask = mask if config.exclude_algebraic else np.ones(self.n, dtype=bool)
        self.newton_tol = max(10 * _EPS / self.rtol, min(0.03, self.rtol**0.5))
        self.z = z0.copy()
        self.zdot = np.asarray(zdot0, dtype=float).copy()
        self.h = float(h)
        self.restart(self.h)
        self.jac = None
        self.jac_current = False
        self.lu = None
        self.lu_c = None
        self.n_jac = 0
        self.n_lu = 0

    def restart(self, h: float):
        """Reset to order 1 from the current point (after a knot)."""
        self.D = np.zeros((MAX_ORDER + 3, self.n))
        self.D[0] = self.z
        self.D[1] = self.zdot * h
        self.h = h
        self.order = 1
        self.n_equal_steps = 0

    def set_step(self, h: float):
        if h != self.h:
            _change_D(self.D, self.order, h / self.h)
            self.h = h
            self.n_equal_steps = 0
            self.lu = None

    def _factor(self, c):
        fz, fzdot = self.jac
        M = sp.csc_matrix(fz + fzdot / c)
        try:
            self.lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularMatrixError(f"iteration matrix is singular at t={self.t:.6g}: {exc}") from exc
        self.lu_c = c
        self.n_lu += 1

    def _update_jacobian(self, t, z, zdot):
        fz, fzdot = self.system.jacobian(t, z, zdot)
        self.jac = (sp.csc_matrix(fz), sp.csc_matrix(fzdot))
        self.jac_abs = (abs(self.jac[0]).tocsr(), abs(self.jac[1]).tocsr())
        self.jac_current = True
        self.lu = None
        self.n_jac += 1

    def attempt(self, h: float | None = None, order: int | None = None) -> StepOutcome:
        """Try one step; the state only changes through :meth:`commit`."""
        if h is not None:
            self.set_step(h)
        if order is not None and order != self.order:
            self.order = int(order)
            self.n_equal_steps = 0
            self.lu = None
        k, h = self.order, self.h
        t_new = self.t + h
        z_pred = self.D[: k + 1].sum(axis=0)
        psi = (_GAMMA[1 : k + 1] @ self.D[1 : k + 1]) / _ALPHA[k]
        c = h / _ALPHA[k]
        scale = self.atol + self.rtol * np.abs(z_pred)

        if self.jac is None:
            self._update_jacobian(t_new, z_pred, psi / c)
        for _ in range(2):
            if self.lu is None or self.lu_c != c:
                self._factor(c)
            converged, iters, d = self._newton(t_new, z_pred, psi, c, scale)
            if converged or self.jac_current:
                break
            self._update_jacobian(t_new, z_pred, psi / c)
        if not converged:
            return StepOutcome(False, False, t_new, None, None, None, np.inf, iters, h, k)

        z_new = z_pred + d
        zdot_new = (psi + d) / c
        err_scale = self.atol + self.rtol * np.abs(z_new)
        error = _ERROR_CONST[k] * d
        err_norm = _rms((error / err_scale)[self.err_mask])
        accepted = self.config.fixed_step is not None or err_norm <= 1.0
        return StepOutcome(accepted, True, t_new, z_new, zdot_new, d, err_norm, iters, h, k)

    def _newton(self, t, z_pred, psi, c, scale):
        d = np.zeros(self.n)
        z = z_pred.copy()
        dz_norm_old = None
        rate = None
        for k in range(self.config.max_newton):
            zdot = (psi + d) / c
            F = self.system.residual(t, z, zdot)
            if not np.all(np.isfinite(F)):
                return False, k + 1, d
            if k > 0 and self._at_rounding_level(F, z, zdot):
                return True, k, d
            dz = -self.lu.solve(F)
            dz_norm = _rms(dz / scale)
            if dz_norm_old is not None:
                rate = dz_norm / dz_norm_old
            if rate is not None and dz_norm < self.newton_tol:
                # increments at rounding level: a noisy rate is no divergence
                z += dz
                d += dz
                return True, k + 1, d
            if rate is not None and (rate >= 1 or rate ** (self.config.max_newton - k) / (1 - rate) * dz_norm > self.newton_tol):
                return False, k + 1, d
            z += dz
            d += dz
            if dz_norm == 0 or (rate is not None and rate / (1 - rate) * dz_norm < self.newton_tol):
                return True, k + 1, d
            dz_norm_old = dz_norm
        return False, self.config.max_newton, d

    def _at_rounding_level(self, F, z, zdot) -> bool:
        fz, fzdot = self.jac_abs
        mag = 1.0 + fz @ np.abs(z) + fzdot @ np.abs(zdot)
        return bool(np.all(np.abs(F) <= 1e3 * _EPS * mag))

    def commit(self, out: StepOutcome):
        k = self.order
        self.t = out.t
        self.z = out.z
        self.zdot = out.zdot
        self.n_equal_steps += 1
        d = out.d
        self.D[k + 2] = d - self.D[k + 1]
        self.D[k + 1] = d
        for i in reversed(range(k + 1)):
            self.D[i] += self.D[i + 1]
        self.jac_current = False

    def error_norms_neighbours(self, z_new):
        """Error estimates of orders ``k - 1`` and ``k + 1`` after a commit."""
        k = self.order
        scale = (self.atol + self.rtol * np.abs(z_new))
        m = self.err_mask
        err_m = _rms((_ERROR_CONST[k - 1] * self.D[k] / scale)[m]) if k > 1 else np.inf
        err_p = _rms((_ERROR_CONST[k + 1] * self.D[k + 2] / scale)[m]) if k < self.config.max_order else np.inf
        return err_m, err_p


def advance_one_step(stepper: BdfStepper, h: float | None = None, order: int | None = None) -> StepOutcome:
    """Attempt one step and commit it when accepted."""
    out = stepper.attempt(h, order)
    if out.accepted:
        stepper.commit(out)
    return out


def _scaled_residual(system, t, z, zdot) -> float:
    F = system.residual(t, z, zdot)
    fz, fzdot = system.jacobian(t, z, zdot)
    mag = 1.0 + abs(sp.csr_matrix(fz)) @ np.abs(z) + abs(sp.csr_matrix(fzdot)) @ np.abs(zdot)
    return float(np.max(np.abs(F) / mag, initial=0.0))


def _initial_step(system, t0, tf, z0, zdot0, config, atol) -> float:
    if config.first_step is not None:
        return min(config.first_step, tf - t0)
    mask = np.asarray(system.differential, dtype=bool)
    scale = atol + config.rtol * np.abs(z0)
    d0 = _rms((z0 / scale)[mask])
    d1 = _rms((zdot0 / scale)[mask])
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return float(min(h, config.max_step, 1e-2 * (tf - t0)))


def integrate(system, z0, zdot0, tspan, config: IntegratorConfig | None = None, callback: Callable | None = None) -> Trajectory:
    """Integrate ``system`` from a consistent ``(z0, zdot0)`` over ``tspan``.

    Step endpoints land exactly on the knots of the boundary data and on
    ``tf``; the method restarts at order 1 after each knot.  ``callback``
    receives ``(t, z, zdot)`` after every accepted step.
    """
    config = config or IntegratorConfig()
    t0, tf = map(float, tspan)
    if not tf > t0:
        raise ValueError("tspan must satisfy tf > t0")
    z0 = np.asarray(z0, dtype=float)
    zdot0 = np.asarray(zdot0, dtype=float)
    if z0.shape != (system.size,) or zdot0.shape != (system.size,):
        raise ValueError(f"initial values must have {system.size} entries")

    res0 = _scaled_residual(system, t0, z0, zdot0)
    if not res0 <= config.consistency_tol:
        raise InconsistentStart(f"initial residual {res0:.3g} exceeds {config.consistency_tol:g}")

    knots = list(np.asarray(system.knots(t0, tf), dtype=float))
    stops = sorted(set(knots + [tf]))
    atol = np.broadcast_to(np.asarray(config.atol, dtype=float), z0.shape)

    if config.fixed_step is not None:
        h = config.fixed_step
    else:
        h = _initial_step(system, t0, tf, z0, zdot0, config, atol)
    stepper = BdfStepper(system, t0, z0, zdot0, min(h, stops[0] - t0), config)

    times, states, derivs, stats, restarts = [t0], [z0.copy()], [zdot0.copy()], [], [0]
    n_rejected = 0
    for stop in stops:
        span = max(1.0, abs(stop))
        if config.fixed_step is not None:
            n_sub = max(1, int(round((stop - stepper.t) / config.fixed_step)))
            h_fixed = (stop - stepper.t) / n_sub
        while stop - stepper.t > 4 * _EPS * span:
            if len(stats) >= config.max_steps:
                raise StepUnderflow(f"maximum number of steps ({config.max_steps}) reached at t={stepper.t:.6g}")
            if config.fixed_step is not None:
                h_try = h_fixed
            else:
                h_try = min(stepper.h, config.max_step)
            remaining = stop - stepper.t
            if h_try >= remaining or remaining - h_try < 1e-3 * h_try:
                h_try = remaining
            elif remaining < 2 * h_try:
                h_try = remaining / 2
            out = stepper.attempt(h_try)
            if not out.converged:
                if config.fixed_step is not None:
                    raise NewtonDivergence(f"Newton failed in fixed-step mode at t={out.t:.6g}")
                n_rejected += 1
                h_new = 0.5 * stepper.h
                if h_new < config.min_step:
                    raise NewtonDivergence(f"Newton failed at minimum step size near t={stepper.t:.6g}")
                stepper.set_step(h_new)
                continue
            if not out.accepted:
                n_rejected += 1
                factor = max(MIN_FACTOR, SAFETY * out.error_norm ** (-1.0 / (out.order + 1)))
                h_new = stepper.h * factor
                if h_new < config.min_step:
                    raise StepUnderflow(f"step size underflow near t={stepper.t:.6g}")
                stepper.set_step(h_new)
                continue

            stepper.commit(out)
            if stop - stepper.t <= 4 * _EPS * span:
                stepper.t = stop
            times.append(stepper.t)
            states.append(out.z.copy())
            derivs.append(out.zdot.copy())
            stats.append(StepStats(out.h, out.order, out.newton_iters, out.error_norm))
            if callback is not None:
                callback(stepper.t, out.z, out.zdot)
            if config.fixed_step is not None:
                if stepper.order < config.max_order:
                    stepper.order += 1
                continue
            _adapt(stepper, out, config)

        if stop < tf:
            restarts.append(len(times) - 1)
            stepper.restart(stepper.h)

    return Trajectory(
        np.array(times),
        np.array(states),
        np.array(derivs),
        stats,
        restarts,
        n_rejected,
        stepper.n_jac,
        stepper.n_lu,
    )


def _adapt(stepper: BdfStepper, out: StepOutcome, config: IntegratorConfig):
    """Choose order and step size after an accepted step."""
    k = stepper.order
    if stepper.n_equal_steps < k + 1:
        factor = min(MAX_FACTOR, SAFETY * max(out.error_norm, 1e-10) ** (-1.0 / (k + 1)))
        factor = max(1.0, factor) if factor >= 1.2 else 1.0
        if factor > 1.0:
            stepper.set_step(stepper.h * factor)
        return
    err_m, err_p = stepper.error_norms_neighbours(out.z)
    errs = np.array([err_m, out.error_norm, err_p])
    with np.errstate(divide="ignore"):
        factors = errs ** (-1.0 / np.arange(k, k + 3))
    best = int(np.argmax(factors))
    new_order = k + best - 1
    factor = min(MAX_FACTOR, SAFETY * factors[best])
    if new_order != k:
        stepper.order = new_order
        stepper.lu = None
    if factor >= 1.2 or factor < 1.0:
        stepper.set_step(stepper.h * max(MIN_FACTOR, factor))
    stepper.n_equal_steps = 0 if (factor >= 1.2 or new_order != k) else stepper.n_equal_steps


class GenericDae:
    """Small DAE defined by a residual callable, for tests and examples.

    The Jacobians are central finite differences unless given.
    """

    def __init__(self, residual, size, differential, jacobian=None, knots=()):
        self._residual = residual
        self.size = int(size)
        self.differential = np.asarray(differential, dtype=bool)
        self._jacobian = jacobian
        self._knots = np.asarray(knots, dtype=float)

    def residual(self, t, z, zdot):
        return np.asarray(self._residual(t, z, zdot), dtype=float)

    def jacobian(self, t, z, zdot):
        if self._jacobian is not None:
            return self._jacobian(t, z, zdot)
        n = self.size
        fz = np.zeros((n, n))
        fzdot = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1e-7 * max(1.0, abs(z[j]))
            fz[:, j] = (self.residual(t, z + e, zdot) - self.residual(t, z - e, zdot)) / (2 * e[j])
            e[j] = 1e-7 * max(1.0, abs(zdot[j]))
            fzdot[:, j] = (self.residual(t, z, zdot + e) - self.residual(t, z, zdot - e)) / (2 * e[j])
        return sp.csc_matrix(fz), sp.csc_matrix(fzdot)

    def knots(self, t0, tf):
        k = self._knots
        return k[(k > t0) & (k < tf)]
