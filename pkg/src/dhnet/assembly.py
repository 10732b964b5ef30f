"""Assembly of the semi-explicit network DAE.

Unknowns are stacked as ``z = (x1, x2, y)``:

* ``x1`` -- temperatures ``T_{i,2..n_i}`` of every pipe, pipe by pipe;
* ``x2`` -- velocities ``v_1..v_N``;
* ``y``  -- inlet temperatures ``T_{1,1}..T_{N,1}`` followed by the pressure
  pairs ``p_1(0), p_1(L_1), ..., p_N(0), p_N(L_N)``.

The model is ``x1' = f1``, ``x2' = f2`` (or ``0 = f2`` for the reduced
variant), ``0 = g1(t, x, y)``, ``0 = g2(t, x)``.  Row order of ``g1``:
pressure continuity, perfect mixing, plant inlet temperature, plant inlet
pressure, plant return pressure, consumer outlet temperatures, junction
energy balance.  Row order of ``g2``: junction mass balance, consumer mass
coupling, consumer demand.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .discretization import SpatialScheme, advection_block
from .exceptions import DimensionError, SingularAlgebraicPart
from .network import NetworkModel, consumer_matrices, incidence_matrix
from .signals import collect_knots

VARIANTS = ("full", "reduced")
# condition numbers above this count as numerically singular
SINGULAR_COND = 1.0 / (1000.0 * np.finfo(float).eps)


class VelocitySignWarning(UserWarning):
    """A pipe velocity is not strictly positive."""


@dataclass(frozen=True)
class StateLayout:
    n_points: tuple[int, ...]

    @cached_property
    def N(self) -> int:
        return len(self.n_points)

    @cached_property
    def x1_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(np.asarray(self.n_points) - 1)]).astype(int)

    @property
    def n_tilde(self) -> int:
        return int(self.x1_offsets[-1])

    @property
    def n_x(self) -> int:
        return self.n_tilde + self.N

    @property
    def n_y(self) -> int:
        return 3 * self.N

    @property
    def size(self) -> int:
        return self.n_x + self.n_y

    @property
    def x1(self) -> slice:
        return slice(0, self.n_tilde)

    @property
    def x2(self) -> slice:
        return slice(self.n_tilde, self.n_x)

    @property
    def y(self) -> slice:
        return slice(self.n_x, self.size)

    def pipe_x1(self, i: int) -> slice:
        return slice(int(self.x1_offsets[i]), int(self.x1_offsets[i + 1]))

    @cached_property
    def outlets(self) -> np.ndarray:
        """Position of ``T_{i,n_i}`` inside ``x1`` for every pipe."""
        return self.x1_offsets[1:] - 1

    def inlet_T(self, i: int) -> int:
        return i

    def p0(self, i: int) -> int:
        return self.N + 2 * i

    def pL(self, i: int) -> int:
        return self.N + 2 * i + 1

    def split(self, z):
        z = np.asarray(z)
        return z[self.x1], z[self.x2], z[self.y]

    def join(self, x1, x2, y) -> np.ndarray:
        return np.concatenate([np.ravel(x1), np.ravel(x2), np.ravel(y)])

    def temperature_field(self, z, i: int) -> np.ndarray:
        """All ``n_i`` temperatures of pipe ``i``, inlet first."""
        x1, _, y = self.split(z)
        return np.concatenate([[y[i]], x1[self.pipe_x1(i)]])

    def names(self, pipe_ids) -> list[str]:
        names = []
        for pid, n in zip(pipe_ids, self.n_points):
            names += [f"T[{pid},{j}]" for j in range(2, n + 1)]
        names += [f"v[{pid}]" for pid in pipe_ids]
        names += [f"T[{pid},1]" for pid in pipe_ids]
        for pid in pipe_ids:
            names += [f"p[{pid},0]", f"p[{pid},L]"]
        return names


class Jacobians(NamedTuple):
    f1_x1: sp.csr_matrix
    f1_x2: sp.csr_matrix
    f1_y: sp.csr_matrix
    f2_x1: sp.csr_matrix
    f2_x2: sp.csr_matrix
    f2_y: sp.csr_matrix
    g1_x: sp.csr_matrix
    g1_y: sp.csr_matrix
    g2_x: sp.csr_matrix
    g2_y: sp.csr_matrix


@dataclass
class IndexReport:
    cond_g1_y: float
    g2_y_is_zero: bool
    min_velocity: float
    velocities_positive: bool
    cond_index2: float | None = None
    cond_index1: float | None = None

    @property
    def g1_y_regular(self) -> bool:
        return self.cond_g1_y < SINGULAR_COND


def _diag(u) -> sp.csr_matrix:
    return sp.diags(np.asarray(u, dtype=float), format="csr")


def _csr(a) -> sp.csr_matrix:
    return sp.csr_matrix(a, dtype=float)


class DaeOperators:
    """Matrices of the assembled DAE and their evaluation.

    Built by :func:`assemble`; immutable afterwards.
    """

    def __init__(self, model: NetworkModel, order: int = 1, variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.model = model
        self.scheme = SpatialScheme(order)
        self.variant = variant
        self.layout = StateLayout(tuple(p.params.n_points for p in model.pipes))
        self._build()

    # ------------------------------------------------------------------ build
    def _build(self):
        model, lay = self.model, self.layout
        N, nt, c = model.N, lay.n_tilde, model.constants
        rho, cp = c.rho, c.cp
        params = [p.params for p in model.pipes]
        area = np.array([p.area for p in params])
        self.area = area

        blocks = [advection_block(self.scheme, p.n_points, p.dx) for p in params]
        a_f1 = sp.lil_matrix((nt, N))
        d_f1 = sp.lil_matrix((nt, 3 * N))
        cool = np.zeros(nt)
        cool_const = np.zeros(nt)
        for i, (p, blk) in enumerate(zip(params, blocks)):
            rows = lay.pipe_x1(i)
            a_f1[rows, i] = -blk.scale
            d_f1[rows, lay.inlet_T(i)] = blk.inlet[:, None]
            coef = 4.0 * p.heat_transfer / (p.diameter * cp * rho)
            cool[rows] = -coef
            cool_const[rows] = coef * c.T_ext
        self.A_f1 = a_f1.tocsr()
        self.A_f2 = sp.block_diag([blk.matrix for blk in blocks], format="csr")
        self.D_f1 = d_f1.tocsr()
        self.A_f4 = _diag(cool)
        self.d_1 = cool_const

        self.A_f3 = _diag([-p.lam / (2.0 * p.diameter) for p in params])
        d_f2 = sp.lil_matrix((N, 3 * N))
        for i, p in enumerate(params):
            d_f2[i, lay.p0(i)] = 1.0 / (p.length * rho)
            d_f2[i, lay.pL(i)] = -1.0 / (p.length * rho)
        self.D_f2 = d_f2.tocsr()
        self.d_2 = np.array([-c.g * p.height_diff / p.length for p in params])

        inc = incidence_matrix(model)
        c1, c2 = consumer_matrices(model)
        self.incidence, self.C1, self.C2 = inc, c1, c2
        self._build_g1(inc, c2)
        self._build_g2(inc, c1, c2)

        if self.n_g1 + self.n_g2 != 3 * N:
            raise DimensionError(
                f"algebraic equations ({self.n_g1} + {self.n_g2}) do not match "
                f"algebraic unknowns ({3 * N})"
            )

    def _build_g1(self, inc, c2):
        model, lay = self.model, self.layout
        N, nt, n_c = model.N, lay.n_tilde, model.n_c
        rho, cp = model.constants.rho, model.constants.cp
        junctions = range(model.n_s, model.n_s + model.n_junc)

        pressure_rows = []
        for j in junctions:
            ind = np.flatnonzero(inc.full[j])
            for s, q in zip(ind[:-1], ind[1:]):
                row = np.zeros(3 * N)
                row[lay.pL(s) if inc.full[j, s] == -1 else lay.p0(s)] = -1.0
                row[lay.pL(q) if inc.full[j, q] == -1 else lay.p0(q)] = 1.0
                pressure_rows.append(row)
        mixing_rows = []
        for j in junctions:
            leaving = np.flatnonzero(inc.full[j] == 1)
            for q in leaving[1:]:
                row = np.zeros(3 * N)
                row[lay.inlet_T(leaving[0])] = 1.0
                row[lay.inlet_T(q)] = -1.0
                mixing_rows.append(row)
        self.n_p, self.n_out = len(pressure_rows), len(mixing_rows)

        plant_rows = np.zeros((3, 3 * N))
        plant_rows[0, lay.inlet_T(0)] = 1.0
        plant_rows[1, lay.p0(0)] = 1.0
        plant_rows[2, lay.pL(N - 1)] = 1.0
        tout_rows = np.hstack([c2, np.zeros((n_c, 2 * N))])
        parts = [np.reshape(pressure_rows, (-1, 3 * N)), np.reshape(mixing_rows, (-1, 3 * N)), plant_rows, tout_rows]
        self.D_g12 = _csr(np.vstack(parts))
        self.n_D = self.D_g12.shape[0]
        self._plant_row = self.n_p + self.n_out

        self.A_g1p = _csr(cp * rho * inc.reduced.clip(min=0) * self.area)
        self.A_g1m = _csr(cp * rho * inc.reduced.clip(max=0) * self.area)
        sel_v = sp.hstack([sp.csr_matrix((N, nt)), sp.identity(N)], format="csr")
        sel_out = sp.csr_matrix((np.ones(N), (np.arange(N), lay.outlets)), shape=(N, nt + N))
        sel_tin = sp.hstack([sp.identity(N), sp.csr_matrix((N, 2 * N))], format="csr")
        self.A_g1c1, self.A_g1c2, self.A_g1c3 = sel_v, sel_out, sel_tin
        self.n_g1 = self.n_D + model.n_junc

    def _build_g2(self, inc, c1, c2):
        model, lay = self.model, self.layout
        N, nt, n_c, n_j = model.N, lay.n_tilde, model.n_c, model.n_junc
        rho, cp = model.constants.rho, model.constants.cp
        zero_t = lambda rows: np.zeros((rows, nt))  # noqa: E731
        a11 = np.hstack([zero_t(n_j), inc.reduced * self.area])
        a12 = np.hstack([zero_t(n_c), (c1 - c2) * rho])
        self.A_g21 = _csr(np.vstack([a11, a12, np.zeros((n_c, nt + N))]))
        q1 = np.hstack([zero_t(n_c), c1 * (cp * rho * self.area)])
        self.A_g22 = _csr(np.vstack([np.zeros((n_j + n_c, nt + N)), q1]))
        # selects T_{i,n_i} of each consumer's inlet pipe
        q2 = np.zeros((n_c, nt + N))
        for k, (i_in, _) in enumerate(model.consumer_pipes()):
            q2[k, lay.outlets[i_in]] = 1.0
        self.A_g23 = _csr(np.vstack([np.zeros((n_j + n_c, nt + N)), q2]))
        self.n_g2 = n_j + 2 * n_c
        self._demand_row = n_j + n_c

    # ----------------------------------------------------- time-dependent data
    def boundary(self, t: float) -> np.ndarray:
        """``B(t)``: right-hand side of the linear ``g1`` rows."""
        b = np.zeros(self.n_D)
        plant = self.model.plant
        r = self._plant_row
        b[r : r + 3] = [-plant.T_in(t), -plant.p_in(t), -plant.p_return(t)]
        b[r + 3 :] = [-cons.T_out(t) for cons in self.model.consumers]
        return b

    def boundary_rate(self, t: float) -> np.ndarray:
        b = np.zeros(self.n_D)
        plant = self.model.plant
        r = self._plant_row
        b[r : r + 3] = [-plant.T_in.derivative(t), -plant.p_in.derivative(t), -plant.p_return.derivative(t)]
        b[r + 3 :] = [-cons.T_out.derivative(t) for cons in self.model.consumers]
        return b

    def demand(self, t: float) -> np.ndarray:
        """``B_Q(t)``."""
        q = np.zeros(self.n_g2)
        q[self._demand_row :] = [-cons.demand(t) for cons in self.model.consumers]
        return q

    def demand_rate(self, t: float) -> np.ndarray:
        q = np.zeros(self.n_g2)
        q[self._demand_row :] = [-cons.demand.derivative(t) for cons in self.model.consumers]
        return q

    def outlet_offset(self, t: float) -> np.ndarray:
        """The ``-T_out`` shift inside the demand rows of ``g2``."""
        d = np.zeros(self.n_g2)
        d[self._demand_row :] = [-cons.T_out(t) for cons in self.model.consumers]
        return d

    def outlet_offset_rate(self, t: float) -> np.ndarray:
        d = np.zeros(self.n_g2)
        d[self._demand_row :] = [-cons.T_out.derivative(t) for cons in self.model.consumers]
        return d

    def knots(self, t0: float, tf: float) -> np.ndarray:
        return collect_knots(self.model.signals(), t0, tf)

    # -------------------------------------------------------------- functions
    def eval_f(self, t: float, z) -> tuple[np.ndarray, np.ndarray]:
        x1, x2, y = self.layout.split(z)
        f1 = (self.A_f1 @ x2) * (self.A_f2 @ x1 + self.D_f1 @ y) + self.A_f4 @ x1 + self.d_1
        f2 = self.A_f3 @ (x2 * x2) + self.D_f2 @ y + self.d_2
        return f1, f2

    def eval_g(self, t: float, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z)
        x, y = z[: self.layout.n_x], z[self.layout.y]
        v = self.A_g1c1 @ x
        energy = self.A_g1p @ (v * (self.A_g1c3 @ y)) + self.A_g1m @ (v * (self.A_g1c2 @ x))
        g1 = np.concatenate([self.D_g12 @ y + self.boundary(t), energy])
        g2 = self.A_g21 @ x + (self.A_g22 @ x) * (self.A_g23 @ x + self.outlet_offset(t)) + self.demand(t)
        return g1, g2

    def eval_jacobians(self, t: float, z) -> Jacobians:
        lay = self.layout
        z = np.asarray(z)
        x1, x2, y = lay.split(z)
        x = z[: lay.n_x]
        N, nt = lay.N, lay.n_tilde

        speed = self.A_f1 @ x2
        f1_x1 = (_diag(speed) @ self.A_f2 + self.A_f4).tocsr()
        f1_x2 = (_diag(self.A_f2 @ x1 + self.D_f1 @ y) @ self.A_f1).tocsr()
        f1_y = (_diag(speed) @ self.D_f1).tocsr()
        f2_x1 = sp.csr_matrix((N, nt))
        f2_x2 = _diag(2.0 * (self.A_f3 @ x2))
        f2_y = self.D_f2

        v = self.A_g1c1 @ x
        e_x = (
            self.A_g1p @ _diag(self.A_g1c3 @ y) @ self.A_g1c1
            + self.A_g1m @ (_diag(self.A_g1c2 @ x) @ self.A_g1c1 + _diag(v) @ self.A_g1c2)
        )
        g1_x = sp.vstack([sp.csr_matrix((self.n_D, lay.n_x)), e_x], format="csr")
        g1_y = sp.vstack([self.D_g12, self.A_g1p @ _diag(v) @ self.A_g1c3], format="csr")

        g2_x = (
            self.A_g21
            + _diag(self.A_g23 @ x + self.outlet_offset(t)) @ self.A_g22
            + _diag(self.A_g22 @ x) @ self.A_g23
        ).tocsr()
        g2_y = sp.csr_matrix((self.n_g2, lay.n_y))
        return Jacobians(f1_x1, f1_x2, f1_y, f2_x1, f2_x2, f2_y, g1_x, g1_y, g2_x, g2_y)

    # --------------------------------------------------------- residual form
    @property
    def differential(self) -> np.ndarray:
        """Mask of components whose time derivative enters the residual."""
        return self.differential_mask(self.variant)

    def differential_mask(self, variant: str) -> np.ndarray:
        lay = self.layout
        mask = np.zeros(lay.size, dtype=bool)
        mask[lay.x1] = True
        if variant == "full":
            mask[lay.x2] = True
        return mask

    @property
    def size(self) -> int:
        return self.layout.size

    def residual(self, t: float, z, zdot, variant: str | None = None) -> np.ndarray:
        variant = variant or self.variant
        lay = self.layout
        f1, f2 = self.eval_f(t, z)
        g1, g2 = self.eval_g(t, z)
        zdot = np.asarray(zdot)
        r_euler = zdot[lay.x2] - f2 if variant == "full" else -f2
        return np.concatenate([zdot[lay.x1] - f1, r_euler, g1, g2])

    def jacobian(self, t: float, z, zdot, variant: str | None = None):
        """``(dF/dz, dF/dzdot)`` of :meth:`residual` as sparse matrices."""
        variant = variant or self.variant
        lay = self.layout
        J = self.eval_jacobians(t, z)
        g1_x1, g1_x2 = J.g1_x[:, : lay.n_tilde], J.g1_x[:, lay.n_tilde :]
        g2_x1, g2_x2 = J.g2_x[:, : lay.n_tilde], J.g2_x[:, lay.n_tilde :]
        fz = sp.bmat(
            [
                [-J.f1_x1, -J.f1_x2, -J.f1_y],
                [-J.f2_x1, -J.f2_x2, -J.f2_y],
                [g1_x1, g1_x2, J.g1_y],
                [g2_x1, g2_x2, J.g2_y],
            ],
            format="csc",
        )
        fzdot = _diag(self.differential_mask(variant).astype(float)).tocsc()
        return fz, fzdot

    # ----------------------------------------------------- hidden constraint
    def g2_time_derivative(self, t: float, z) -> np.ndarray:
        x = np.asarray(z)[: self.layout.n_x]
        return (self.A_g22 @ x) * self.outlet_offset_rate(t) + self.demand_rate(t)

    def hidden_constraint(self, t: float, z, zdot) -> np.ndarray:
        """Total time derivative of ``g2`` along ``(z, zdot)``."""
        n_x = self.layout.n_x
        g2_x = self.eval_jacobians(t, z).g2_x
        return g2_x @ np.asarray(zdot)[:n_x] + self.g2_time_derivative(t, z)

    def hidden_constraint_jacobian(self, t: float, z, zdot):
        """Derivatives of :meth:`hidden_constraint` w.r.t. ``x`` and ``xdot``."""
        n_x = self.layout.n_x
        x = np.asarray(z)[:n_x]
        xdot = np.asarray(zdot)[:n_x]
        g2_x = self.eval_jacobians(t, z).g2_x
        d_x = (
            _diag(self.A_g22 @ xdot) @ self.A_g23
            + _diag(self.A_g23 @ xdot) @ self.A_g22
            + _diag(self.outlet_offset_rate(t)) @ self.A_g22
        ).tocsr()
        return d_x, g2_x

    # ---------------------------------------------------------- diagnostics
    def index_diagnostics(self, t: float, z, raise_on_singular: bool = True) -> IndexReport:
        """Check the structural facts behind the index of the model at ``z``.

        Condition numbers are computed after scaling every row to unit
        max-norm, so they measure rank deficiency rather than unit choice.
        """
        lay = self.layout
        J = self.eval_jacobians(t, z)
        v = np.asarray(z)[lay.x2]
        report = IndexReport(
            cond_g1_y=_rect_cond(J.g1_y.toarray()),
            g2_y_is_zero=J.g2_y.count_nonzero() == 0,
            min_velocity=float(v.min()),
            velocities_positive=bool(np.all(v > 0)),
        )
        if not report.velocities_positive:
            bad = [self.model.pipes[i].id for i in np.flatnonzero(v <= 0)]
            warnings.warn(f"non-positive velocity in pipes {bad}", VelocitySignWarning, stacklevel=2)

        f_y = sp.vstack([J.f1_y, J.f2_y]).toarray()
        hidden = J.g2_x.toarray() @ f_y
        report.cond_index2 = _rect_cond(np.vstack([J.g1_y.toarray(), hidden]))
        g1_x2 = J.g1_x[:, lay.n_tilde :].toarray()
        g2_x2 = J.g2_x[:, lay.n_tilde :].toarray()
        alg = np.block(
            [
                [J.f2_x2.toarray(), J.f2_y.toarray()],
                [g1_x2, J.g1_y.toarray()],
                [g2_x2, np.zeros((self.n_g2, lay.n_y))],
            ]
        )
        report.cond_index1 = _rect_cond(alg)

        if raise_on_singular:
            if not report.g1_y_regular:
                raise SingularAlgebraicPart(f"dg1/dy is singular (cond={report.cond_g1_y:.3g})")
            relevant = report.cond_index2 if self.variant == "full" else report.cond_index1
            if not relevant < SINGULAR_COND:
                raise SingularAlgebraicPart(
                    f"algebraic Jacobian of the {self.variant} model is singular (cond={relevant:.3g})"
                )
        return report

    # ------------------------------------------------------- physical checks
    def consumer_balance(self, t: float, z) -> np.ndarray:
        """Demand fulfilment ``Q_k - c_p A rho v (T_{i,n_i} - T_out)`` per consumer."""
        _, g2 = self.eval_g(t, z)
        return -g2[self._demand_row :]

    def junction_balances(self, t: float, z):
        """Mass and energy imbalance at every junction with the gross throughputs.

        Returns ``(mass, mass_flux, energy, energy_flux)``; the imbalances are
        outflow minus inflow, the fluxes the summed inflow.
        """
        lay = self.layout
        x1, v, y = lay.split(z)
        rho, cp = self.model.constants.rho, self.model.constants.cp
        q = rho * self.area * v
        red = self.incidence.reduced
        mass = red @ q
        mass_flux = np.clip(-red, 0, None) @ q
        e_in = cp * q * x1[lay.outlets]
        e_out = cp * q * y[: lay.N]
        energy = red.clip(min=0) @ e_out + red.clip(max=0) @ e_in
        energy_flux = np.clip(-red, 0, None) @ e_in
        return mass, mass_flux, energy, energy_flux


def _rect_cond(a: np.ndarray) -> float:
    """2-norm condition number of the row-equilibrated matrix (rank-revealing)."""
    a = np.asarray(a, dtype=float)
    scale = np.abs(a).max(axis=1, keepdims=True)
    if np.any(scale == 0):
        return np.inf
    s = np.linalg.svd(a / scale, compute_uv=False)
    k = min(a.shape)
    if s[k - 1] == 0:
        return np.inf
    return float(s[0] / s[k - 1])


def assemble(model: NetworkModel, order: int = 1, variant: str = "full") -> DaeOperators:
    """Assemble the DAE operators of ``model`` for a spatial order and model variant."""
    return DaeOperators(model, order, variant)
