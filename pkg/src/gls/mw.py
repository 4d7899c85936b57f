"""Multiplicative-weights approximation for grouped least squares.

Each iteration minimizes the weighted quadratic ``sum_i ||x - s_i||^2 / w_i``
with one linear solve and then grows every weight in proportion to its
group's current norm.  The best iterate by the true objective is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .instance import Instance, Solution, obj, quad_min

# weights are rescaled by their sum once it exceeds this, to stay in range
_RESCALE_AT = 1e150


@dataclass
class MwConfig:
    """Solver settings.

    ``strict_mode`` runs the full theoretical iteration count with the
    theoretical width ``rho``.  Otherwise the solver stops once the best
    objective has not improved by a relative ``early_stop_rel`` for
    ``patience`` consecutive iterations, and uses the aggressive width
    ``rho = eps`` (a unit step ``eps / rho``) unless ``rho_override`` is
    given.
    """

    eps: float = 0.1
    rho_override: float | None = None
    max_iters_override: int | None = None
    early_stop_rel: float | None = 1e-4
    strict_mode: bool = False
    patience: int = 10
    solve_tol: float = 1e-9
    record_weights: bool = False

    def __post_init__(self):
        if not 0 < self.eps <= 0.5:
            raise ValueError(f"eps must lie in (0, 0.5], got {self.eps}")
        if self.rho_override is not None and not self.rho_override > 0:
            raise ValueError("rho_override must be positive")
        if self.max_iters_override is not None and self.max_iters_override < 1:
            raise ValueError("max_iters_override must be positive")


@dataclass
class MwState:
    w: np.ndarray
    mu: float
    t: int = 0
    best_x: np.ndarray | None = None
    best_obj: float = math.inf
    best_t: int = 0
    log_scale: float = 0.0
    # diagnostics of the most recent step
    last_obj: float = math.nan
    last_opt2: float = math.nan
    last_norms: np.ndarray | None = field(default=None, repr=False)
    last_mu_prev: float = math.nan
    last_mu: float = math.nan

    @classmethod
    def initial(cls, inst: Instance) -> "MwState":
        w = np.ones(inst.k)
        return cls(w=w, mu=float(w.sum()))

    def log_weights(self) -> np.ndarray:
        """Logarithms of the unscaled weights."""
        return np.log(self.w) + self.log_scale


def mw_defaults(inst: Instance, eps: float) -> tuple[float, int]:
    """Theoretical width ``2 k^(1/3) eps^(-2/3)`` and iteration count ``10 rho ln(n) / eps^2``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    rho = 2.0 * inst.k ** (1.0 / 3.0) * eps ** (-2.0 / 3.0)
    N = math.ceil(10.0 * rho * math.log(max(inst.n, 1)) / eps ** 2)
    return rho, max(N, 1)


def _zero_scale(inst: Instance) -> float:
    return obj(inst, np.zeros(inst.n)) + 1.0


def mw_step(inst: Instance, state: MwState, rho: float, eps: float,
            tol: float = 1e-9) -> tuple[np.ndarray, float, MwState]:
    """One reweighting round; returns ``(x_t, lambda_t, new_state)``.

    ``lambda_t == 0`` signals an exact fit: the new state's best iterate is
    ``x_t`` and its weights are left unchanged.
    """
    mu_prev = float(state.w.sum())
    x, opt2 = quad_min(inst, state.w, tol=tol)
    lam = math.sqrt(max(mu_prev * opt2, 0.0))
    norms = inst.group_norms(x)
    objx = float(norms.sum())

    improved = objx < state.best_obj
    new = replace(state, t=state.t + 1, last_obj=objx, last_opt2=opt2, last_norms=norms,
                  last_mu_prev=mu_prev)
    if improved:
        new.best_x, new.best_obj, new.best_t = x, objx, state.t + 1

    if lam <= 1e-9 * _zero_scale(inst):
        new.w = state.w.copy()
        new.mu = mu_prev
        new.last_mu = mu_prev
        return x, 0.0, new

    k = inst.k
    inc = (eps / rho * norms / lam + 2.0 * eps ** 2 / (k * rho)) * mu_prev
    w = state.w + inc
    mu = float(w.sum())
    new.last_mu = mu
    if mu > _RESCALE_AT:
        w = w / mu
        new.log_scale = state.log_scale + math.log(mu)
        mu = float(w.sum())
    new.w = w
    new.mu = mu
    return x, lam, new


def solve_mw(inst: Instance, config: MwConfig | None = None) -> Solution:
    """Run the reweighting loop and return the best iterate found.

    The trace holds one row per iteration with the weight sum before and
    after the update, ``lambda``, the objective, the quadratic optimum and
    the smallest weight share ``min_i w_i / mu``.
    """
    config = config or MwConfig()
    eps = config.eps
    rho, N = mw_defaults(inst, eps)
    if config.rho_override is not None:
        rho = config.rho_override
    elif not config.strict_mode:
        rho = eps
    if config.max_iters_override is not None:
        N = config.max_iters_override

    state = MwState.initial(inst)
    trace: list[dict] = []
    weights_log: list[np.ndarray] = []
    stale = 0
    exact = False
    for _ in range(N):
        prev_best = state.best_obj
        x, lam, state = mw_step(inst, state, rho, eps, tol=config.solve_tol)
        trace.append({
            "iter": state.t,
            "mu_prev": state.last_mu_prev,
            "mu": state.last_mu,
            "lambda": lam,
            "obj": state.last_obj,
            "opt2": state.last_opt2,
            "min_weight_share": float(state.w.min() / state.w.sum()),
        })
        if config.record_weights:
            weights_log.append(state.log_weights())
        if lam == 0.0:
            exact = True
            break
        if config.strict_mode or config.early_stop_rel is None:
            continue
        if prev_best - state.best_obj > config.early_stop_rel * abs(prev_best):
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    info = {"rho": rho, "eps": eps, "N": N, "best_iter": state.best_t, "exact_fit": exact,
            "final_log_weights": state.log_weights()}
    if config.record_weights:
        info["log_weights"] = weights_log
    return Solution(x=state.best_x, objective=obj(inst, state.best_x), iterations=state.t,
                    trace=trace, solver_tag="mw", info=info)


def kl_potential(inst: Instance, w, xbar, opt_val: float, log_weights=None) -> float:
    """Lower potential ``(1/OPT) sum_i ||xbar - s_i||_{L_i} log w_i``.

    Pass ``log_weights`` instead of ``w`` when the weights have been
    rescaled (see :meth:`MwState.log_weights`).
    """
    if not opt_val > 0:
        raise ValueError("opt_val must be positive")
    logw = np.asarray(log_weights, dtype=float) if log_weights is not None else np.log(np.asarray(w, float))
    return float(inst.group_norms(xbar) @ logw / opt_val)
