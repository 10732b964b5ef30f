"""Consistent initial values by constrained least-squares projection.

The guess ``w_g = (xdot, x, y)`` is projected onto the set where the DAE
constraints hold at ``t0``::

    min 1/2 |w - w_g|^2   s.t.   c(w) = 0

For the full model ``c`` stacks ``xdot - f``, ``g1``, ``g2`` and the hidden
constraint ``d/dt g2``; for the reduced model ``xdot1 - f1``, ``f2``, ``g1``
and ``g2``.  The projection is solved by a trust-region SQP method with a
Byrd-Omojokun normal/tangential step split and an l2 merit function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import DaeOperators
from .exceptions import DimensionError, NoConvergence, SingularKKT

_ETA = 1e-4  # minimum actual/predicted reduction to accept a step
_RHO = 0.1  # share of predicted reduction owed to the constraint part


@dataclass(frozen=True)
class TrustRegionOptions:
    tol_constraint: float = 1e-10
    tol_kkt: float = 1e-8
    max_iter: int = 100
    radius: float = 1.0
    expand: float = 2.0
    contract: float = 0.25
    low_ratio: float = 0.25
    high_ratio: float = 0.75
    normal_share: float = 0.8


@dataclass
class ProjectionResult:
    w: np.ndarray
    constraint: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


class _KKT:
    """Factorised ``[[I, J^T], [J, 0]]`` for one linearisation."""

    def __init__(self, J: sp.spmatrix, blocks=None):
        m, n = J.shape
        self.n = n
        K = sp.bmat([[sp.identity(n), J.T], [J, None]], format="csc")
        try:
            self.lu = spla.splu(K)
        except RuntimeError as exc:
            raise SingularKKT(f"constraint Jacobian is rank deficient{_offending(J, blocks)}") from exc

    def solve(self, top, bottom):
        sol = self.lu.solve(np.concatenate([top, bottom]))
        if not np.all(np.isfinite(sol)):
            raise SingularKKT("KKT solve produced non-finite values")
        return sol[: self.n], sol[self.n :]


def _offending(J, blocks) -> str:
    if not blocks:
        return ""
    dense_ok = J.shape[1] <= 4000
    for name, rows in blocks:
        sub = J[rows]
        if sub.shape[0] == 0 or not dense_ok:
            continue
        if np.linalg.matrix_rank(sub.toarray()) < sub.shape[0]:
            return f" (block {name!r})"
    return ""


def project_onto_constraints(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], sp.spmatrix],
    w_guess,
    w_start=None,
    options: TrustRegionOptions | None = None,
    blocks=None,
    raise_on_failure: bool = True,
) -> ProjectionResult:
    """Closest point to ``w_guess`` with ``fun(w) = 0`` (trust-region SQP).

    Constraint rows are scaled once by ``1/max(1, |row of jac|_inf)`` at the
    start point; the feasible set and the minimiser are unaffected.  The trust
    region is measured relative to ``max(1, |w_guess|)`` componentwise.

    Curvature of the constraints enters through Hessian-vector products
    formed from Jacobian differences, which are exact when every constraint
    is at most quadratic in ``w`` (true for the network DAE).  Without a
    start point, a damped least-norm Newton phase first restores feasibility.
    """
    opts = options or TrustRegionOptions()
    w_guess = np.asarray(w_guess, dtype=float)
    w = w_guess.copy() if w_start is None else np.asarray(w_start, dtype=float).copy()
    sigma = np.maximum(1.0, np.abs(w_guess))

    J = sp.csr_matrix(jac(w))
    row_max = abs(J).max(axis=1).toarray().ravel()
    srow = 1.0 / np.maximum(1.0, row_max)
    S = sp.diags(srow)

    def cfun(v):
        return srow * fun(v)

    def sjac(v):
        return (S @ sp.csr_matrix(jac(v))).tocsr()

    def snorm(p):
        return float(np.linalg.norm(p / sigma))

    c = cfun(w)
    Js = (S @ J).tocsr()
    history = []
    if w_start is None and np.abs(c).max(initial=0.0) > opts.tol_constraint:
        w, c, Js = _restore_feasibility(cfun, sjac, w, c, Js, blocks, history)
    radius, mu = opts.radius, 1.0
    m = c.size

    for it in range(opts.max_iter + 1):
        kkt = _KKT(Js, blocks)
        grad = w - w_guess
        proj, lam = kkt.solve(-grad, np.zeros(m))
        kkt_res = float(np.abs(proj).max(initial=0.0))
        c_inf = float(np.abs(c).max(initial=0.0))
        history.append((it, c_inf, kkt_res, radius))
        if c_inf <= opts.tol_constraint and kkt_res <= opts.tol_kkt:
            # one undamped step from inside the tolerance sharpens feasibility
            step, _ = kkt.solve(np.zeros(w.size), -c)
            c_new = cfun(w + step)
            if np.abs(c_new).max(initial=0.0) <= c_inf:
                w, c = w + step, c_new
            return ProjectionResult(w, c / srow, kkt_res, it, True, history)
        if it == opts.max_iter:
            break

        def hessp(p, w=w, Js=Js, lam=lam):
            # Hessian of the Lagrangian times p
            scale = snorm(p)
            if scale == 0.0:
                return np.zeros_like(p)
            q = p / scale
            return p + scale * ((sjac(w + q) - Js).T @ lam)

        # normal step: least-norm Newton step for the constraints
        v, _ = kkt.solve(np.zeros(w.size), -c)
        nv = snorm(v)
        truncated = nv > opts.normal_share * radius
        if truncated:
            v *= opts.normal_share * radius / nv
        # tangential step: projected CG on the Lagrangian model
        t, hit = _projected_cg(kkt, hessp, grad + hessp(v), v, sigma, radius)
        truncated = truncated or hit
        p = v + t

        Bp = hessp(p)
        dq = float(grad @ p) + 0.5 * float(p @ Bp)
        dc = float(np.linalg.norm(c) - np.linalg.norm(c + Js @ p))
        cnoise = 100.0 * np.finfo(float).eps * np.sqrt(m) * max(1.0, float(np.abs(w).max()))
        if abs(dc) <= cnoise:
            dc = 0.0
        if dc > 0:
            mu = max(mu, dq / ((1.0 - _RHO) * dc) + 1e-8)
        pred = -dq + mu * dc
        phi0 = 0.5 * float(grad @ grad) + mu * float(np.linalg.norm(c))

        accepted, ratio, trial = False, -1.0, p
        c_trial = cfun(w + p)
        for attempt in range(2):
            if attempt == 1:
                if not np.all(np.isfinite(c_trial)):
                    break
                # second-order correction against the curvature of c
                soc, _ = kkt.solve(np.zeros(w.size), -c_trial)
                trial = p + soc
                c_trial = cfun(w + trial)
            if not np.all(np.isfinite(c_trial)):
                continue
            # objective change in closed form, free of cancellation
            dobj = float(grad @ trial) + 0.5 * float(trial @ trial)
            ared = -dobj + mu * float(np.linalg.norm(c) - np.linalg.norm(c_trial))
            # slack of a few ulps of the merit keeps tiny steps from being
            # judged by rounding noise
            slack = 10.0 * np.finfo(float).eps * max(1.0, phi0) + mu * cnoise
            ratio = (ared + slack) / (pred + slack) if pred + slack > 0 else -1.0
            if ratio >= _ETA:
                accepted = True
                break

        if accepted:
            w, c = w + trial, c_trial
            if ratio > opts.high_ratio and truncated:
                radius *= opts.expand
            elif ratio < opts.low_ratio:
                radius *= opts.contract
            Js = sjac(w)
        else:
            radius = opts.contract * min(radius, snorm(p))
            if radius < 1e-14:
                break

    result = ProjectionResult(w, c / srow, kkt_res, it, False, history)
    if raise_on_failure:
        raise NoConvergence(
            f"no consistent point after {it} iterations (|c|_inf={np.abs(c).max():.3g}, kkt={kkt_res:.3g})"
        )
    return result


def _projected_cg(kkt, hessp, r, v, sigma, radius, max_iter=200):
    """Steihaug CG for ``min r.t + t.B t/2`` over ``J t = 0``, ``|v + t| <= radius``.

    Returns the step and whether the trust-region boundary (or negative
    curvature) stopped the iteration.
    """
    zeros = np.zeros(kkt.lu.shape[0] - kkt.n)
    t = np.zeros_like(r)
    g = -kkt.solve(-r, zeros)[0]
    # g.g equals r.Pr in exact arithmetic and is immune to the multiplier part of r
    rg = float(g @ g)
    if rg == 0.0:
        return t, False
    tol = min(0.5, np.sqrt(np.sqrt(rg))) * np.sqrt(rg)
    d = -g
    for _ in range(max_iter):
        Bd = hessp(d)
        dBd = float(d @ Bd)
        if dBd <= 0.0:
            return t + _to_boundary((v + t) / sigma, d / sigma, radius) * d, True
        alpha = rg / dBd
        if np.linalg.norm((v + t + alpha * d) / sigma) >= radius:
            return t + _to_boundary((v + t) / sigma, d / sigma, radius) * d, True
        t = t + alpha * d
        r = r + alpha * Bd
        g = -kkt.solve(-r, zeros)[0]
        rg_new = float(g @ g)
        if np.sqrt(rg_new) <= tol:
            break
        d = -g + (rg_new / rg) * d
        rg = rg_new
    return t, False


def _restore_feasibility(cfun, jac, w, c, J, blocks, history, max_iter=30):
    """Damped least-norm Newton on ``c(w) = 0``; returns the last iterate."""
    for _ in range(max_iter):
        norm = float(np.linalg.norm(c))
        step, _ = _KKT(J, blocks).solve(np.zeros(w.size), -c)
        lam = 1.0
        while lam > 1e-4:
            c_new = cfun(w + lam * step)
            if np.all(np.isfinite(c_new)) and np.linalg.norm(c_new) <= (1.0 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
        else:
            break
        w = w + lam * step
        c, J = c_new, jac(w)
        history.append(("restore", float(np.abs(c).max()), lam))
        if np.abs(c).max() <= 1e-13:
            break
    return w, c, J


def _to_boundary(u, d, radius) -> float:
    """Positive ``tau`` with ``|u + tau d| = radius`` (``|u| <= radius``)."""
    dd = float(d @ d)
    if dd == 0.0:
        return 0.0
    ud, uu = float(u @ d), float(u @ u)
    disc = ud**2 - dd * (uu - radius**2)
    return max(0.0, (-ud + np.sqrt(max(disc, 0.0))) / dd)


# --------------------------------------------------------------- DAE layer
@dataclass
class InitProblem:
    operators: DaeOperators
    z_guess: np.ndarray
    zdot_guess: np.ndarray | None = None
    t0: float = 0.0
    variant: str | None = None

    def __post_init__(self):
        size = self.operators.layout.size
        self.z_guess = np.asarray(self.z_guess, dtype=float)
        if self.zdot_guess is None:
            self.zdot_guess = np.zeros(size)
        self.zdot_guess = np.asarray(self.zdot_guess, dtype=float)
        if self.z_guess.shape != (size,) or self.zdot_guess.shape != (size,):
            raise DimensionError(f"guess must have {size} entries")
        self.variant = self.variant or self.operators.variant


@dataclass
class InitResult:
    z: np.ndarray
    zdot: np.ndarray
    residuals: dict
    kkt_residual: float
    iterations: int
    converged: bool

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values())


def _constraint_blocks(ops: DaeOperators, variant: str):
    lay = ops.layout
    nt, N = lay.n_tilde, lay.N
    names = [("xdot1-f1", nt), ("xdot2-f2" if variant == "full" else "f2", N), ("g1", ops.n_g1), ("g2", ops.n_g2)]
    if variant == "full":
        names.append(("hidden", ops.n_g2))
    blocks, start = [], 0
    for name, size in names:
        blocks.append((name, slice(start, start + size)))
        start += size
    return blocks


def init_constraints(ops: DaeOperators, t0: float, variant: str):
    """Return ``(fun, jac)`` of the initialisation constraints in ``w = (xdot, z)``."""
    lay = ops.layout
    n_x = lay.n_x

    def unpack(w):
        xdot, z = w[:n_x], w[n_x:]
        zdot = np.concatenate([xdot, np.zeros(lay.n_y)])
        return z, zdot

    def fun(w):
        z, zdot = unpack(w)
        parts = [ops.residual(t0, z, zdot, variant)]
        if variant == "full":
            parts.append(ops.hidden_constraint(t0, z, zdot))
        return np.concatenate(parts)

    def jac(w):
        z, zdot = unpack(w)
        fz, fzdot = ops.jacobian(t0, z, zdot, variant)
        top = sp.hstack([fzdot[:, :n_x], fz], format="csr")
        if variant != "full":
            return top
        h_x, h_xdot = ops.hidden_constraint_jacobian(t0, z, zdot)
        bottom = sp.hstack([h_xdot, h_x, sp.csr_matrix((ops.n_g2, lay.n_y))], format="csr")
        return sp.vstack([top, bottom], format="csr")

    return fun, jac


def consistent_init(problem: InitProblem, options: TrustRegionOptions | None = None) -> InitResult:
    """Project ``problem``'s guess onto the consistent manifold at ``t0``."""
    ops, variant, t0 = problem.operators, problem.variant, problem.t0
    lay = ops.layout
    n_x = lay.n_x
    fun, jac = init_constraints(ops, t0, variant)
    blocks = _constraint_blocks(ops, variant)
    w_guess = np.concatenate([problem.zdot_guess[:n_x], problem.z_guess])
    # distances are measured relative to the guess magnitude, so pressures in
    # Pa and velocities in m/s carry comparable weight; powers of two keep the
    # rescaling exact
    sigma = np.exp2(np.round(np.log2(np.maximum(1.0, np.abs(w_guess)))))
    smat = sp.diags(sigma)
    res = project_onto_constraints(
        lambda u: fun(sigma * u),
        lambda u: jac(sigma * u) @ smat,
        w_guess / sigma,
        options=options,
        blocks=blocks,
    )
    w = sigma * res.w
    z = w[n_x:]
    zdot = np.concatenate([w[:n_x], np.zeros(lay.n_y)])
    c = fun(w)
    norms = {name: float(np.abs(c[rows]).max(initial=0.0)) for name, rows in blocks}
    return InitResult(z, zdot, norms, res.kkt_residual, res.iterations, res.converged)


def constraint_norms(ops: DaeOperators, t0: float, z, zdot, variant: str | None = None) -> dict:
    """Max-norm of every constraint block at ``(z, zdot)``."""
    variant = variant or ops.variant
    n_x = ops.layout.n_x
    fun, _ = init_constraints(ops, t0, variant)
    c = fun(np.concatenate([np.asarray(zdot)[:n_x], np.asarray(z)]))
    return {name: float(np.abs(c[rows]).max(initial=0.0)) for name, rows in _constraint_blocks(ops, variant)}


def default_anchor(ops: DaeOperators, t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Physically plausible starting guess ``(z, zdot)``.

    Supply-side pipes carry the plant temperature and inlet pressure,
    return-side pipes the mean consumer return temperature and the return
    pressure.  Consumer velocities solve the demand equations with these
    temperatures; the remaining velocities follow from mass conservation.
    """
    model, lay = ops.model, ops.layout
    N = lay.N
    plant = model.plant
    T_sup = plant.T_in(t0)
    T_ret = np.mean([c.T_out(t0) for c in model.consumers]) if model.consumers else T_sup
    supply = model.supply_side()
    z = np.zeros(lay.size)
    n_x = lay.n_x
    for i in range(N):
        T = T_sup if supply[i] else T_ret
        z[lay.x1][lay.pipe_x1(i)] = T
        z[n_x + lay.inlet_T(i)] = T
        p = plant.p_in(t0) if supply[i] else plant.p_return(t0)
        z[n_x + lay.p0(i)] = p
        z[n_x + lay.pL(i)] = p

    rows, rhs = [ops.incidence.reduced * ops.area], [np.zeros(model.n_junc)]
    cons = np.zeros((2 * model.n_c, N))
    target = np.zeros(2 * model.n_c)
    rho, cp = model.constants.rho, model.constants.cp
    for k, (c, (i_in, i_out)) in enumerate(zip(model.consumers, model.consumer_pipes())):
        dT = max(T_sup - c.T_out(t0), 1.0)
        v = c.demand(t0) / (cp * rho * ops.area[i_in] * dT)
        cons[2 * k, i_in] = 1.0
        cons[2 * k + 1, i_out] = 1.0
        target[2 * k] = target[2 * k + 1] = v
    rows.append(cons)
    rhs.append(target)
    v, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    z[lay.x2] = v
    return z, np.zeros(lay.size)
