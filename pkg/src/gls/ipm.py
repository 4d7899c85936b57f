"""Log-barrier interior point method for grouped least squares.

The problem is written as ``min sum_i y_i`` subject to
``y_i >= ||x - s_i||_{L_i}`` and each stage minimizes

    f(t, x, y) = t * sum_i y_i - sum_i log(y_i^2 - ||x - s_i||_{L_i}^2)

by damped Newton steps.  Every Newton system is solved by eliminating the
scalar ``y_i`` blocks, which leaves ``sum_i alpha_i L_i`` minus ``k`` rank-one
terms; the rank-one part is removed with the Sherman-Morrison-Woodbury
identity so that only solves in ``sum_i alpha_i L_i`` and one ``k x k`` dense
solve are required.

An optional squared fidelity ``c ||x - s0||^2`` can be added to the
objective.  Its epigraph variable is eliminated in closed form, which leaves
``t c ||x - s0||^2`` inside the barrier and one extra unit of barrier degree.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .instance import Instance, Solution, obj, quad_min
from .linalg import InconsistentSystemError, dense_solve, solve_sdd

log = logging.getLogger(__name__)


class InfeasiblePointError(ValueError):
    pass


@dataclass
class QuadFidelity:
    """The term ``c * ||x - s0||_2^2``."""

    s0: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.s0 = np.asarray(self.s0, dtype=float)
        if not self.c > 0:
            raise ValueError("fidelity weight must be positive")

    def value(self, x) -> float:
        d = np.asarray(x) - self.s0
        return self.c * float(d @ d)


@dataclass
class BarrierPoint:
    x: np.ndarray
    y: np.ndarray
    t: float


@dataclass
class IpmConfig:
    """Barrier schedule and Newton settings.

    ``t0=None`` picks ``k / max(1, obj(x_init))``.  A stage stops when half
    the squared Newton decrement drops to ``newton_tol``; the outer loop
    stops once the central-path gap bound ``2k/t`` is at most ``eps``.
    Instances with more than ``smw_max_groups`` groups fold the rank-one
    terms of small support into a sparse base matrix that is factorized
    directly, keeping only the wide terms in the low-rank correction; the
    same direct route is used whenever ``n <= direct_max_n``.  The Newton
    stopping test is relative to the barrier scale ``max(1, t * sum(y))``,
    so ``newton_tol`` bounds the objective error rather than the barrier's.
    """

    eps: float = 1e-6
    t0: float | None = None
    t_factor: float = 20.0
    newton_tol: float = 1e-10
    max_newton: int = 50
    alpha: float = 0.1
    beta: float = 0.5
    solve_tol: float = 1e-12
    smw_max_groups: int = 64
    direct_max_n: int = 2000
    sparse_support: int = 64
    max_stages: int = 200
    record_values: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.t_factor > 1:
            raise ValueError("t_factor must exceed 1")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


def _slacks(inst: Instance, p: BarrierPoint) -> tuple[np.ndarray, np.ndarray]:
    q = inst.group_sq_norms(p.x)
    return q, p.y * p.y - q


def is_strictly_feasible(inst: Instance, p: BarrierPoint) -> bool:
    q, D = _slacks(inst, p)
    return bool(np.all(p.y > 0) and np.all(D > 1e-14 * p.y * p.y))


def _full_obj(inst: Instance, x, fid: QuadFidelity | None) -> float:
    return obj(inst, x) + (fid.value(x) if fid is not None else 0.0)


def barrier_degree(inst: Instance, fid: QuadFidelity | None = None) -> int:
    return 2 * inst.k + (1 if fid is not None else 0)


def feasible_init(inst: Instance, t0: float | None = None,
                  fid: QuadFidelity | None = None) -> BarrierPoint:
    """Start at the unit-weight quadratic minimizer with ``y_i = norm_i + 1``."""
    x, _ = quad_min(inst, np.ones(inst.k), tol=1e-12)
    y = inst.group_norms(x) + 1.0
    if t0 is None:
        t0 = inst.k / max(1.0, _full_obj(inst, x, fid))
    return BarrierPoint(x=x, y=y, t=float(t0))


def barrier_value(inst: Instance, p: BarrierPoint, fid: QuadFidelity | None = None) -> float:
    q, D = _slacks(inst, p)
    if np.any(D <= 0) or np.any(p.y <= 0):
        return math.inf
    lin = float(p.y.sum()) + (fid.value(p.x) if fid is not None else 0.0)
    return float(p.t * lin - np.log(D).sum())


def barrier_grad(inst: Instance, p: BarrierPoint,
                 fid: QuadFidelity | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``f(t, x, y)`` in ``x`` and ``y``."""
    q, D = _slacks(inst, p)
    if np.any(D <= 0):
        raise InfeasiblePointError("point is not strictly feasible")
    U = inst.group_gradients(p.x)
    gx = np.asarray(U @ (2.0 / D)).ravel()
    if fid is not None:
        gx = gx + 2.0 * p.t * fid.c * (p.x - fid.s0)
    gy = p.t - 2.0 * p.y / D
    return gx, gy


def _reduced_parts(inst: Instance, p: BarrierPoint):
    q, D = _slacks(inst, p)
    if np.any(D <= 0):
        raise InfeasiblePointError("point is not strictly feasible")
    y2 = p.y * p.y
    alpha = 2.0 / D
    beta = alpha * 2.0 / (y2 + q)
    h = 2.0 * (y2 + q) / (D * D)          # d2f / dy_i^2
    b = -4.0 * p.y / (D * D)              # d2f / dx dy_i, times u_i
    U = inst.group_gradients(p.x)
    return alpha, beta, h, b, U


def hessian_solve(inst: Instance, p: BarrierPoint, rhs_x, rhs_y, *,
                  method: str = "auto", tol: float = 1e-12,
                  sparse_support: int = 64, shift: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``H [dx; dy] = [rhs_x; rhs_y]`` with ``H`` the Hessian of ``f`` at ``p``.

    ``method="smw"`` uses ``k + 1`` conjugate-gradient solves in
    ``A = sum_i alpha_i L_i`` plus one ``k x k`` dense solve.  ``"split"``
    moves rank-one terms with at most ``sparse_support`` nonzeros into a
    sparse base matrix, factorizes it, and applies the low-rank correction
    only for the remaining terms.  ``"auto"`` picks ``smw`` for ``k <= 64``.
    ``shift`` adds ``shift * I`` to the ``x`` block (the squared fidelity).
    """
    rhs_x = np.asarray(rhs_x, dtype=float)
    rhs_y = np.asarray(rhs_y, dtype=float)
    alpha, beta, h, b, U = _reduced_parts(inst, p)
    # eliminate y: dy_i = (rhs_y_i - b_i u_i^T dx) / h_i
    rx = rhs_x - U @ (b / h * rhs_y)
    # For a rank-one L_i the pivoted term alpha L_i - beta u u^T equals
    # 2 / (y^2 + q) L_i; forming it directly avoids cancellation near the cone.
    single = inst.single_row
    alpha = np.where(single, beta / alpha, alpha)
    beta = np.where(single, 0.0, beta)
    if method == "auto":
        method = "smw" if inst.k <= 64 else "split"
    if method == "smw":
        dx = _smw_solve(inst, alpha, beta, U, rx, tol, shift)
    elif method == "split":
        dx = _split_solve(inst, alpha, beta, U, rx, sparse_support, shift)
    else:
        raise ValueError(f"unknown method {method!r}")
    dy = (rhs_y - b * np.asarray(U.T @ dx).ravel()) / h
    return dx, dy


def _woodbury(base_solve, W: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """``(B - W W^T)^{-1} rhs`` given a solver for ``B``."""
    z = base_solve(rhs)
    if W.shape[1] == 0:
        return z
    Wd = W.toarray()
    Z = np.column_stack([base_solve(Wd[:, j]) for j in range(Wd.shape[1])])
    M = np.eye(Wd.shape[1]) - Wd.T @ Z
    return z + Z @ dense_solve(M, Wd.T @ z)


def _shifted(inst, alpha, shift):
    A = inst.aggregate(alpha)
    if shift > 0:
        return (A + shift * sp.identity(inst.n, format="csr")).tocsr(), []
    return A, inst.null_blocks


def _smw_solve(inst, alpha, beta, U, rx, tol, shift=0.0):
    A, blocks = _shifted(inst, alpha, shift)

    def base_solve(v):
        if not np.any(v):
            return np.zeros_like(v)
        x, _ = solve_sdd(A, v, tol=tol, null_blocks=blocks)
        return x

    cols = np.flatnonzero(beta > 0)
    W = U[:, cols] @ sp.diags(np.sqrt(beta[cols]))
    return _woodbury(base_solve, W, rx)


def _split_solve(inst, alpha, beta, U, rx, sparse_support, shift=0.0):
    U = sp.csc_matrix(U)
    support = np.diff(U.indptr)
    wide = support > sparse_support
    Wfull = U @ sp.diags(np.sqrt(beta))
    Ws = Wfull[:, np.flatnonzero(~wide & (beta > 0))]
    Wd = Wfull[:, np.flatnonzero(wide & (beta > 0))]
    A, blocks = _shifted(inst, alpha, shift)
    B = (A - Ws @ Ws.T).tocsr()
    mask = np.ones(inst.n)
    grounded = [blk[0] for blk in blocks]
    mask[grounded] = 0.0
    if grounded:
        P = sp.diags(mask)
        B = (P @ B @ P + sp.diags(1.0 - mask)).tocsr()
    try:
        lu = spla.splu(B.tocsc())
    except RuntimeError:
        # an exactly zero pivot at extreme t; a relative nudge keeps the direction usable
        bump = 1e-14 * float(np.abs(B.diagonal()).max())
        lu = spla.splu((B + bump * sp.identity(inst.n, format="csr")).tocsc())

    def base_solve(v):
        x = lu.solve(v * mask)
        for blk in blocks:
            x[blk] -= x[blk].mean()
        return x

    return _woodbury(base_solve, Wd, rx)


def optimal_y(inst: Instance, x, t: float) -> np.ndarray:
    """Exact minimizer of ``f(t, x, .)``: ``y_i = (1 + sqrt(1 + t^2 q_i)) / t``."""
    q = inst.group_sq_norms(x)
    return (1.0 + np.sqrt(1.0 + t * t * q)) / t


def _center(inst: Instance, p: BarrierPoint, cfg: IpmConfig, values: list | None,
            fid: QuadFidelity | None = None):
    """Damped Newton at fixed ``t``.  Returns ``(point, steps, grad_norm, status)``.

    ``y`` is eliminated exactly after every step, so the full Newton
    direction coincides with the Newton direction of ``min_y f(t, x, y)``
    in ``x`` and every trial point is strictly feasible.
    """
    use_smw = inst.k <= cfg.smw_max_groups and inst.n > cfg.direct_max_n
    method = "smw" if use_smw else "split"
    p = BarrierPoint(p.x, optimal_y(inst, p.x, p.t), p.t)
    shift = 2.0 * p.t * fid.c if fid is not None else 0.0
    fval = barrier_value(inst, p, fid)
    if values is not None:
        values.append(fval)
    gnorm = math.nan
    for step in range(1, cfg.max_newton + 1):
        gx, gy = barrier_grad(inst, p, fid)
        gnorm = float(math.sqrt(gx @ gx + gy @ gy))
        try:
            dx, dy = hessian_solve(inst, p, -gx, -gy, method=method, tol=cfg.solve_tol,
                                   sparse_support=cfg.sparse_support, shift=shift)
        except (RuntimeError, np.linalg.LinAlgError, InconsistentSystemError):
            return p, step - 1, gnorm, "solve_failed"
        slope = float(gx @ dx + gy @ dy)
        dec2 = -slope
        if dec2 / 2.0 <= cfg.newton_tol * max(1.0, p.t * float(p.y.sum())):
            return p, step - 1, gnorm, "ok"
        if slope >= 0:
            # round-off has eaten the descent direction
            return p, step - 1, gnorm, "ok" if dec2 < 1e-6 else "no_descent"
        s = 1.0
        while s > 1e-20:
            xc = p.x + s * dx
            cand = BarrierPoint(xc, optimal_y(inst, xc, p.t), p.t)
            fc = barrier_value(inst, cand, fid)
            if fc <= fval + cfg.alpha * s * slope:
                break
            s *= cfg.beta
        else:
            return p, step - 1, gnorm, "ok" if dec2 < 1e-6 else "line_search_floor"
        p, fval = cand, fc
        if values is not None:
            values.append(fval)
    return p, cfg.max_newton, gnorm, "max_newton"


def solve_ipm(inst: Instance, config: IpmConfig | None = None,
              fidelity: QuadFidelity | None = None) -> Solution:
    """Barrier method; the returned ``info['sum_y']`` is within ``info['gap_bound']`` of OPT.

    With ``fidelity`` the objective gains ``c ||x - s0||^2`` and the
    certificate refers to ``info['upper']``, the barrier's linear objective.
    """
    cfg = config or IpmConfig()
    nu = barrier_degree(inst, fidelity)
    p = feasible_init(inst, cfg.t0, fidelity)
    trace: list[dict] = []
    values: list[list[float]] = []
    total_newton = 0
    status = "ok"
    centered = None
    for stage in range(cfg.max_stages):
        vals = [] if cfg.record_values else None
        q, steps, gnorm, st = _center(inst, p, cfg, vals, fidelity)
        total_newton += steps
        if vals is not None:
            values.append(vals)
        if st in ("line_search_floor", "no_descent", "solve_failed"):
            log.warning("newton stalled at t=%.3g (%s); returning last centered point", p.t, st)
            status = st
            break
        if st == "max_newton":
            status = st
        p = q
        centered = p
        gap = nu / p.t
        trace.append({
            "stage": stage,
            "t": p.t,
            "newton_steps": steps,
            "grad_norm": gnorm,
            "sum_y": float(p.y.sum()),
            "obj": _full_obj(inst, p.x, fidelity),
            "gap_bound": gap,
        })
        if gap <= cfg.eps:
            break
        p = BarrierPoint(p.x, p.y, p.t * cfg.t_factor)
    if centered is None:
        centered = p
    info = {
        "sum_y": float(centered.y.sum()),
        "y": centered.y.copy(),
        "t": centered.t,
        "gap_bound": nu / centered.t,
        "newton_steps": total_newton,
        "status": status,
    }
    if cfg.record_values:
        info["barrier_values"] = values
    if fidelity is not None:
        info["upper"] = info["sum_y"] + fidelity.value(centered.x) + 1.0 / centered.t
    return Solution(x=centered.x, objective=_full_obj(inst, centered.x, fidelity),
                    iterations=total_newton,
                    trace=trace, solver_tag="ipm", info=info)
