"""Algebraically reversible steppers and O(1)-memory exact backpropagation.

Reversible Heun keeps ``(y, y_hat, f_cached)``; the asynchronous leapfrog
method (ALF) keeps ``(y, v)``. Each step can be undone in closed form, so the
backward pass reconstructs states instead of storing them. The gradients are
those of the discretised forward computation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import BlowUpError, ConfigurationError, ContractError, ReconstructionError, StepBudgetExceeded
from .odecore import ControllerConfig, Solution, StepRecord, error_ratio, next_dt_factor
from .vectorfield import VectorField

__all__ = [
    "RevHeunState",
    "AlfState",
    "revheun_init",
    "revheun_step",
    "revheun_reverse",
    "alf_init",
    "alf_step",
    "alf_reverse",
    "alf_reverse_backprop",
    "leapfrog_midpoint_step",
    "leapfrog_midpoint_reverse",
    "semi_implicit_euler_step",
    "semi_implicit_euler_reverse",
    "ReversibleHeun",
    "AsyncLeapfrog",
    "REVERSIBLE_SOLVERS",
    "get_reversible_solver",
    "reversible_integrate",
    "reversible_backprop",
]


@dataclass(frozen=True)
class RevHeunState:
    t: float
    y: np.ndarray
    y_hat: np.ndarray
    f_cached: np.ndarray
    g_cached: np.ndarray | None = None  # diffusion value, SDE use only


@dataclass(frozen=True)
class AlfState:
    t: float
    y: np.ndarray
    v: np.ndarray


def _nonzero(dt):
    if dt == 0:
        raise ContractError("dt must be non-zero")


# ---------------------------------------------------------------- reversible Heun


def revheun_init(field: VectorField, t0, y0) -> RevHeunState:
    y0 = np.array(y0, dtype=float)
    return RevHeunState(float(t0), y0, y0.copy(), field(t0, y0, check=False))


def revheun_step(field: VectorField, s: RevHeunState, dt):
    """Forward step. Returns ``(new_state, error_estimate)``."""
    _nonzero(dt)
    t1 = s.t + dt
    y_hat = 2.0 * s.y - s.y_hat + s.f_cached * dt
    f1 = field(t1, y_hat, check=False)
    y = s.y + 0.5 * (s.f_cached + f1) * dt
    err = 0.5 * (f1 - s.f_cached) * dt
    return RevHeunState(t1, y, y_hat, f1), err


def revheun_reverse(field: VectorField, s_next: RevHeunState, dt) -> RevHeunState:
    """Exact algebraic inverse of :func:`revheun_step` with the same ``dt``."""
    _nonzero(dt)
    t0 = s_next.t - dt
    y_hat = 2.0 * s_next.y - s_next.y_hat - s_next.f_cached * dt
    f0 = field(t0, y_hat, check=False)
    y = s_next.y - 0.5 * (s_next.f_cached + f0) * dt
    return RevHeunState(t0, y, y_hat, f0)


# ---------------------------------------------------------------- asynchronous leapfrog


def alf_init(field: VectorField, t0, y0) -> AlfState:
    y0 = np.array(y0, dtype=float)
    return AlfState(float(t0), y0, field(t0, y0, check=False))


def alf_step(field: VectorField, s: AlfState, dt):
    """Forward step. Returns ``(new_state, error_estimate)``."""
    _nonzero(dt)
    y_half = s.y + 0.5 * dt * s.v
    v_half = field(s.t + 0.5 * dt, y_half, check=False)
    y = s.y + dt * v_half
    v = 2.0 * v_half - s.v
    return AlfState(s.t + dt, y, v), 0.5 * (v - s.v)


def alf_reverse(field: VectorField, s_next: AlfState, dt) -> AlfState:
    _nonzero(dt)
    y_half = s_next.y - 0.5 * dt * s_next.v
    v_half = field(s_next.t - 0.5 * dt, y_half, check=False)
    y = s_next.y - dt * v_half
    v = 2.0 * v_half - s_next.v
    return AlfState(s_next.t - dt, y, v)


def alf_reverse_backprop(field: VectorField, s_next: AlfState, dt, dL_dy_next, dL_dv_next):
    """Reverse one ALF step and pull cotangents back through it.

    The single evaluation at the midpoint serves both the reconstruction and
    the vector-Jacobian product. Returns ``(prior_state, dL_dy, dL_dv, dL_dtheta)``.
    """
    _nonzero(dt)
    gy1 = np.asarray(dL_dy_next, dtype=float)
    gv1 = np.asarray(dL_dv_next, dtype=float)
    t_half = s_next.t - 0.5 * dt
    y_half = s_next.y - 0.5 * dt * s_next.v
    g_vhalf = gy1 * dt + 2.0 * gv1
    v_half, (g_yhalf, g_theta) = field.value_and_vjp(t_half, y_half, g_vhalf, check=False)
    prior = AlfState(s_next.t - dt, s_next.y - dt * v_half, 2.0 * v_half - s_next.v)
    gy = gy1 + g_yhalf
    gv = 0.5 * dt * g_yhalf - gv1
    return prior, gy, gv, g_theta


# ---------------------------------------------------------------- other reversible schemes


def leapfrog_midpoint_step(field: VectorField, y_prev2, y_prev1, t_prev1, dt):
    """y_{j+1} = y_{j-1} + 2 dt f(t_j, y_j)."""
    return np.asarray(y_prev2, dtype=float) + 2.0 * dt * field(t_prev1, np.asarray(y_prev1, dtype=float), check=False)


def leapfrog_midpoint_reverse(field: VectorField, y_next, y_prev1, t_prev1, dt):
    """Recover y_{j-1} from (y_{j+1}, y_j)."""
    return np.asarray(y_next, dtype=float) - 2.0 * dt * field(t_prev1, np.asarray(y_prev1, dtype=float), check=False)


def semi_implicit_euler_step(f: VectorField, g: VectorField, t, y, v, dt):
    """v' = v + g(t, y) dt, then y' = y + f(t, v') dt."""
    y, v = np.asarray(y, dtype=float), np.asarray(v, dtype=float)
    v1 = v + g(t, y, check=False) * dt
    y1 = y + f(t, v1, check=False) * dt
    return y1, v1


def semi_implicit_euler_reverse(f: VectorField, g: VectorField, t, y1, v1, dt):
    """Undo :func:`semi_implicit_euler_step`; ``t`` is the start time of the step."""
    y1, v1 = np.asarray(y1, dtype=float), np.asarray(v1, dtype=float)
    y = y1 - f(t, v1, check=False) * dt
    v = v1 - g(t, y, check=False) * dt
    return y, v


# ---------------------------------------------------------------- solver objects


class ReversibleHeun:
    """Generic-interface wrapper used by integration and backpropagation."""

    name = "reversible_heun"
    order = 2

    init = staticmethod(revheun_init)
    step = staticmethod(revheun_step)
    reverse = staticmethod(revheun_reverse)

    @staticmethod
    def primary(s: RevHeunState):
        return s.y

    @staticmethod
    def terminal_cotangent(s: RevHeunState, dL_dy):
        z = np.zeros_like(s.y)
        return (np.asarray(dL_dy, dtype=float), z, z.copy())

    @staticmethod
    def add_to_primary(cot, g):
        return (cot[0] + g, cot[1], cot[2])

    @staticmethod
    def step_vjp(field: VectorField, s: RevHeunState, dt, cot):
        """Pull ``cot = (g_y', g_yhat', g_f')`` back through one forward step from ``s``."""
        gy1, gyh1, gf1 = cot
        t1 = s.t + dt
        y_hat1 = 2.0 * s.y - s.y_hat + s.f_cached * dt
        gf1_tot = gf1 + 0.5 * dt * gy1
        _, (gz, gth) = field.value_and_vjp(t1, y_hat1, gf1_tot, check=False)
        gyh1_tot = gyh1 + gz
        gy = gy1 + 2.0 * gyh1_tot
        gyh = -gyh1_tot
        gf = 0.5 * dt * gy1 + dt * gyh1_tot
        return (gy, gyh, gf), gth

    @staticmethod
    def init_vjp(field: VectorField, t0, y0, cot):
        gy, gyh, gf = cot
        gz, gth = field.vjp(t0, y0, gf, check=False)
        return gy + gyh + gz, gth

    @staticmethod
    def init_residual(field: VectorField, s: RevHeunState, y0_scale):
        d1 = np.max(np.abs(s.y_hat - s.y))
        d2 = np.max(np.abs(s.f_cached - field(s.t, s.y, check=False)))
        return max(d1 / y0_scale, d2 / max(1.0, np.max(np.abs(s.f_cached))))


class AsyncLeapfrog:
    name = "alf"
    order = 2

    init = staticmethod(alf_init)
    step = staticmethod(alf_step)
    reverse = staticmethod(alf_reverse)

    @staticmethod
    def primary(s: AlfState):
        return s.y

    @staticmethod
    def terminal_cotangent(s: AlfState, dL_dy):
        return (np.asarray(dL_dy, dtype=float), np.zeros_like(s.y))

    @staticmethod
    def add_to_primary(cot, g):
        return (cot[0] + g, cot[1])

    @staticmethod
    def step_vjp(field: VectorField, s: AlfState, dt, cot):
        gy1, gv1 = cot
        y_half = s.y + 0.5 * dt * s.v
        g_vhalf = gy1 * dt + 2.0 * gv1
        _, (g_yhalf, gth) = field.value_and_vjp(s.t + 0.5 * dt, y_half, g_vhalf, check=False)
        return (gy1 + g_yhalf, 0.5 * dt * g_yhalf - gv1), gth

    @staticmethod
    def init_vjp(field: VectorField, t0, y0, cot):
        gy, gv = cot
        gz, gth = field.vjp(t0, y0, gv, check=False)
        return gy + gz, gth

    @staticmethod
    def init_residual(field: VectorField, s: AlfState, y0_scale):
        f0 = field(s.t, s.y, check=False)
        return np.max(np.abs(s.v - f0)) / max(1.0, np.max(np.abs(f0)))


REVERSIBLE_SOLVERS = {"reversible_heun": ReversibleHeun, "alf": AsyncLeapfrog}


def get_reversible_solver(name: str):
    try:
        return REVERSIBLE_SOLVERS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown reversible solver {name!r}; valid: {sorted(REVERSIBLE_SOLVERS)}"
        ) from None


def reversible_integrate(
    solver,
    field: VectorField,
    y0,
    t0: float,
    t1: float,
    dt: float | None = None,
    cfg: ControllerConfig | None = None,
    dt0: float | None = None,
    store_states: bool = False,
) -> Solution:
    """Fixed-step (``dt``) or adaptive solve with a reversible stepper.

    Accepted step sizes are kept in ``step_records`` so the backward pass can
    replay them. With ``store_states=True`` each record also keeps the full
    solver state, which is what a plain store-everything backward pass needs.
    """
    if isinstance(solver, str):
        solver = get_reversible_solver(solver)
    cfg = cfg or ControllerConfig()
    t0, t1 = float(t0), float(t1)
    if t0 == t1:
        raise ContractError("t0 and t1 must differ")
    direction = 1.0 if t1 > t0 else -1.0
    state = solver.init(field, t0, y0)
    sol = Solution(ts=np.array([t0, t1]), ys=np.empty((2,) + state.y.shape), method=solver)
    sol.ys[0] = state.y
    sol.n_fev = 1
    adaptive = dt is None
    if adaptive:
        h = dt0 if dt0 is not None else 0.01 * abs(t1 - t0)
        step_dt = direction * abs(h)
    else:
        step_dt = direction * abs(float(dt))
    t = t0
    while True:
        dt_try = step_dt
        last = direction * (t + dt_try - t1) >= -1e-9 * abs(dt_try)
        if last:
            dt_try = t1 - t
        new, err = solver.step(field, state, dt_try)
        sol.n_fev += 1
        finite = bool(np.all(np.isfinite(new.y)))
        if adaptive:
            r = error_ratio(state.y, new.y, err, cfg) if finite else np.inf
            accept = r <= 1.0
        else:
            if not finite:
                raise BlowUpError(f"non-finite state at t={t + dt_try}")
            accept = True
        if accept:
            sol.step_records.append(
                StepRecord(t, dt_try, state.y, state=state if store_states else None)
            )
            sol.save_index_after_step.append(1 if last else -1)
            sol.n_accepted += 1
            if last:
                new = replace(new, t=t1)
            state, t = new, new.t
            if last:
                break
        else:
            sol.n_rejected += 1
        if sol.n_accepted + sol.n_rejected > cfg.max_steps:
            raise StepBudgetExceeded(f"more than {cfg.max_steps} steps")
        if adaptive:
            factor = next_dt_factor(r, solver.order, cfg) if np.isfinite(r) else cfg.dfactor
            step_dt = dt_try * factor
            if abs(step_dt) < 1e-14 * max(1.0, abs(t)):
                raise BlowUpError(f"step size underflow at t={t}")
    sol.ys[1] = state.y
    sol.terminal_state = state
    return sol


def reversible_backprop(
    solver,
    field: VectorField,
    terminal_state,
    dt_schedule: Sequence[float],
    dL_dyN,
    guard: float = 1e-6,
):
    """Exact gradients of ``L(y_N)`` by reconstructing states backwards.

    Per step: reverse to the prior state, redo the forward step locally and
    pull the cotangents through it. Returns ``(dL_dy0, dL_dtheta)``.

    Raises :class:`ReconstructionError` when the reconstructed initial state
    violates the solver's initialisation identities by more than ``guard``.
    """
    if isinstance(solver, str):
        solver = get_reversible_solver(solver)
    state = terminal_state
    cot = solver.terminal_cotangent(state, dL_dyN)
    g_theta = np.zeros(field.params.size)
    for dt in reversed(list(dt_schedule)):
        prior = solver.reverse(field, state, dt)
        cot, gth = solver.step_vjp(field, prior, dt, cot)
        g_theta = g_theta + gth
        state = prior
    scale = max(1.0, float(np.max(np.abs(state.y))))
    resid = solver.init_residual(field, state, scale)
    if not resid <= guard:
        raise ReconstructionError(
            f"reconstructed initial state is inconsistent (residual {resid:.3e} > {guard:.1e}); "
            "the step schedule or field probably does not match the forward pass"
        )
    gy0, gth = solver.init_vjp(field, state.t, state.y, cot)
    return gy0, g_theta + gth
