"""Gradient regimes for differential equation solves.

* Discretise-then-optimise (:func:`dto_backprop`): replay each accepted step and
  pull cotangents through its arithmetic. Step-size factors count as constants.
* Optimise-then-discretise (:func:`otd_ode_backprop` and variants): solve the
  continuous adjoint equations backwards in time, stacked with ``y`` itself.
* Forward sensitivities (:func:`forward_sensitivity`).

The stacked adjoint state is laid out as ``[y (d), a_y (d), a_theta (m)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .brownian import BrownianSource
from .errors import ConfigurationError, ContractError, UnsupportedNoiseError
from .odecore import (
    DOPRI5,
    ButcherTableau,
    ControllerConfig,
    Solution,
    integrate,
    rms,
    stage_times,
)
from .sde import SdeField
from .vectorfield import VectorField

__all__ = [
    "AdjointState",
    "AdjointOptions",
    "AdjointResult",
    "rk_step_vjp",
    "dto_backprop",
    "AdjointField",
    "adjoint_seminorm",
    "seminorm_mask",
    "otd_ode_backprop",
    "HermiteInterpolant",
    "otd_interpolated_backprop",
    "checkpoints_from_solution",
    "otd_checkpointed_backprop",
    "otd_cde_backprop",
    "otd_sde_backprop",
    "forward_sensitivity",
]

MODES = ("dto_replay", "otd", "otd_interpolated", "otd_checkpointed", "reversible")


@dataclass
class AdjointState:
    t: float
    y: np.ndarray
    a_y: np.ndarray
    a_theta: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y, self.a_y, self.a_theta])

    @classmethod
    def terminal(cls, t, y, dL_dy, m):
        return cls(float(t), np.asarray(y, float), np.asarray(dL_dy, float), np.zeros(m))


@dataclass(frozen=True)
class AdjointOptions:
    mode: str = "otd"
    norm_mode: str = "rms_full"
    checkpoints: int = 1
    interp_knots: int = 2
    exclude_y: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; valid: {list(MODES)}")
        if self.norm_mode not in ("rms_full", "adjoint_seminorm"):
            raise ConfigurationError(
                f"unknown norm_mode {self.norm_mode!r}; valid: ['adjoint_seminorm', 'rms_full']"
            )
        if self.checkpoints < 1:
            raise ConfigurationError("checkpoints must be at least 1")
        if self.interp_knots < 2:
            raise ConfigurationError("interp_knots must be at least 2")


class AdjointResult(NamedTuple):
    grad_y0: np.ndarray
    grad_params: np.ndarray
    y0_reconstructed: np.ndarray | None = None
    n_accepted: int = 0
    n_rejected: int = 0
    max_residual: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.n_accepted + self.n_rejected


# ---------------------------------------------------------------- discretise-then-optimise


def rk_step_vjp(tab: ButcherTableau, field: VectorField, t, y, dt, g, left_limit=False):
    """Cotangent of ``y`` and of the parameters for one RK step, given the cotangent ``g`` of its output."""
    times = stage_times(tab, t, dt, left_limit)
    zs, ks = [], []
    for i in range(tab.stages):
        z = y
        for j in range(i):
            if tab.a[i, j] != 0.0:
                z = z + (dt * tab.a[i, j]) * ks[j]
        zs.append(z)
        ks.append(field(times[i], z, check=False))
    kbar = [dt * bi * g for bi in tab.b]
    gy = np.array(g, dtype=float)
    gth = np.zeros(field.params.size)
    for i in range(tab.stages - 1, -1, -1):
        if not np.any(kbar[i]):
            continue
        gz, gp = field.vjp(times[i], zs[i], kbar[i], check=False)
        gy = gy + gz
        gth = gth + gp
        for j in range(i):
            if tab.a[i, j] != 0.0:
                kbar[j] = kbar[j] + (dt * tab.a[i, j]) * gz
    return gy, gth


def _save_groups(sol: Solution):
    """Map step index -> save indices reached at its end, plus indices at the start time."""
    ts = np.asarray(sol.ts)
    groups = {}
    for k, i in enumerate(sol.save_index_after_step):
        if i >= 0:
            groups[k] = [j for j in range(len(ts)) if ts[j] == ts[i]]
    t_start = sol.step_records[0].t
    initial = [j for j in range(len(ts)) if ts[j] == t_start]
    return groups, initial


def dto_backprop(sol: Solution, field: VectorField, dL_dys, tab=None):
    """Backpropagate through the recorded discretisation.

    ``dL_dys`` is either one cotangent per saved time (shape of ``sol.ys``) or
    a single cotangent for the final state. Returns ``(dL_dy0, dL_dtheta)``.
    """
    method = tab if tab is not None else sol.method
    records = sol.step_records
    if not records or len(sol.save_index_after_step) != len(records):
        raise ContractError("solution has no step records; integrate with record=True")
    dL = np.asarray(dL_dys, dtype=float)
    if dL.shape == sol.ys.shape:
        per_save = dL
    elif dL.shape == sol.ys.shape[1:]:
        per_save = np.zeros_like(sol.ys)
        per_save[-1] = dL
    else:
        raise ContractError(f"cotangent shape {dL.shape} matches neither ys nor a single state")
    groups, initial = _save_groups(sol)

    g_theta = np.zeros(field.params.size)
    if isinstance(method, ButcherTableau):
        g = np.zeros_like(sol.ys[0])
        for k in range(len(records) - 1, -1, -1):
            for j in groups.get(k, []):
                g = g + per_save[j]
            r = records[k]
            g, gth = rk_step_vjp(method, field, r.t, r.y, r.dt, g, r.left_limit)
            g_theta = g_theta + gth
    else:
        if any(r.state is None for r in records):
            raise ContractError("reversible solution lacks stored states; use store_states=True")
        cot = method.terminal_cotangent(sol.terminal_state, np.zeros_like(sol.ys[0]))
        for k in range(len(records) - 1, -1, -1):
            for j in groups.get(k, []):
                cot = method.add_to_primary(cot, per_save[j])
            r = records[k]
            cot, gth = method.step_vjp(field, r.state, r.dt, cot)
            g_theta = g_theta + gth
        first = records[0]
        g, gth = method.init_vjp(field, first.t, first.y, cot)
        g_theta = g_theta + gth
    for j in initial:
        g = g + per_save[j]
    return g, g_theta


# ---------------------------------------------------------------- continuous adjoints


class AdjointField(VectorField):
    """Right-hand side of the stacked system ``(y, a_y, a_theta)``."""

    def __init__(self, field: VectorField):
        d, m = field.dim_in, field.params.size
        super().__init__(2 * d + m, 2 * d + m)
        self.field, self.d, self.m = field, d, m
        self.time_dependent = True

    def _eval(self, t, Y):
        d = self.d
        y, a = Y[:d], Y[d:2 * d]
        fy, (gy, gp) = self.field.value_and_vjp(t, y, a, check=False)
        return np.concatenate([fy, -gy, -gp])


def seminorm_mask(d: int, m: int, norm_mode: str = "rms_full", exclude_y: bool = False):
    """Boolean mask over the stacked layout selecting entries in the error norm."""
    mask = np.ones(2 * d + m, dtype=bool)
    if norm_mode == "adjoint_seminorm":
        mask[2 * d:] = False
        if exclude_y:
            mask[:d] = False
    elif norm_mode != "rms_full":
        raise ConfigurationError(f"unknown norm_mode {norm_mode!r}; valid: ['adjoint_seminorm', 'rms_full']")
    return mask


def adjoint_seminorm(state, layout, exclude_y: bool = False) -> float:
    """RMS over the y and a_y blocks of a stacked state; ``layout = (d, m)``."""
    d, m = layout
    state = np.asarray(state, dtype=float)
    if state.size != 2 * d + m:
        raise ContractError("state does not match the layout")
    return rms(state[seminorm_mask(d, m, "adjoint_seminorm", exclude_y)])


def _norm_mode(cfg: ControllerConfig, norm_mode):
    return norm_mode if norm_mode is not None else cfg.norm_mode


def otd_ode_backprop(
    field: VectorField,
    yT,
    tT: float,
    t0: float,
    dL_dyT,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    norm_mode: str | None = None,
    exclude_y: bool = False,
    jumps: Sequence[float] = (),
    fixed_dt: float | None = None,
) -> AdjointResult:
    """Continuous adjoint: integrate ``[y, a_y, a_theta]`` from tT back to t0."""
    cfg = cfg or ControllerConfig()
    d, m = field.dim_in, field.params.size
    Y = AdjointState.terminal(tT, yT, dL_dyT, m).stacked()
    mask = seminorm_mask(d, m, _norm_mode(cfg, norm_mode), exclude_y)
    sol = integrate(AdjointField(field), Y, tT, t0, tab, cfg, fixed_dt=fixed_dt, jumps=jumps,
                    norm_mask=mask, record=False)
    Y0 = sol.y_final
    return AdjointResult(Y0[d:2 * d].copy(), Y0[2 * d:].copy(), Y0[:d].copy(),
                         sol.n_accepted, sol.n_rejected)


class HermiteInterpolant:
    """Cubic Hermite interpolation of stored states, slopes from the field."""

    def __init__(self, field: VectorField, ts, ys):
        ts = np.asarray(ts, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if ts.size < 2:
            raise ContractError("need at least two knots")
        order = np.argsort(ts)
        ts, ys = ts[order], ys[order]
        if np.any(np.diff(ts) <= 0):
            raise ContractError("knot times must be distinct")
        slopes = np.stack([field(t, y, check=False) for t, y in zip(ts, ys)])
        self.lo, self.hi = ts[0], ts[-1]
        self._spline = CubicHermiteSpline(ts, ys, slopes, axis=0)

    def __call__(self, t):
        slack = 1e-12 * max(1.0, abs(self.lo), abs(self.hi))
        if t < self.lo - slack or t > self.hi + slack:
            raise ContractError(f"time {t} outside knot range [{self.lo}, {self.hi}]")
        return self._spline(min(max(t, self.lo), self.hi))


class _InterpolatedAdjointField(VectorField):
    def __init__(self, field: VectorField, interp: HermiteInterpolant):
        d, m = field.dim_in, field.params.size
        super().__init__(d + m, d + m)
        self.field, self.interp, self.d = field, interp, d
        self.time_dependent = True

    def _eval(self, t, A):
        gy, gp = self.field.vjp(t, self.interp(t), A[:self.d], check=False)
        return np.concatenate([-gy, -gp])


def otd_interpolated_backprop(
    field: VectorField,
    forward_sol: Solution,
    dL_dyT,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    norm_mode: str | None = None,
    fixed_dt: float | None = None,
) -> AdjointResult:
    """Adjoint solve for ``(a_y, a_theta)`` only; ``y(t)`` comes from interpolating
    the states saved by the forward solve (``forward_sol.ts``/``ys``)."""
    cfg = cfg or ControllerConfig()
    d, m = field.dim_in, field.params.size
    interp = HermiteInterpolant(field, forward_sol.ts, forward_sol.ys)
    t0, tT = forward_sol.ts[0], forward_sol.ts[-1]
    A = np.concatenate([np.asarray(dL_dyT, dtype=float), np.zeros(m)])
    mask = np.ones(d + m, dtype=bool)
    if _norm_mode(cfg, norm_mode) == "adjoint_seminorm":
        mask[d:] = False
    sol = integrate(_InterpolatedAdjointField(field, interp), A, tT, t0, tab, cfg,
                    fixed_dt=fixed_dt, norm_mask=mask, record=False)
    A0 = sol.y_final
    return AdjointResult(A0[:d].copy(), A0[d:].copy(), interp(t0), sol.n_accepted, sol.n_rejected)


def checkpoints_from_solution(sol: Solution):
    """Every accepted step boundary of a forward solve, as ``(t, y)`` pairs."""
    pts = [(r.t, r.y) for r in sol.step_records]
    pts.append((sol.ts[-1], sol.ys[-1]))
    return pts


def otd_checkpointed_backprop(
    field: VectorField,
    checkpoints: Sequence,
    dL_dyT,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    norm_mode: str | None = None,
) -> AdjointResult:
    """Segment-wise adjoint solve; ``y`` restarts from the stored value at each checkpoint.

    ``max_residual`` reports the worst mismatch between the backward-reconstructed
    ``y`` and the stored checkpoint at each segment start.
    """
    cfg = cfg or ControllerConfig()
    ts = np.array([float(t) for t, _ in checkpoints])
    if ts.size < 2 or np.any(np.diff(ts) <= 0):
        raise ContractError("checkpoints must be strictly increasing in time and include both ends")
    ys = [np.asarray(y, dtype=float) for _, y in checkpoints]
    d, m = field.dim_in, field.params.size
    a, a_th = np.asarray(dL_dyT, dtype=float), np.zeros(m)
    n_acc = n_rej = 0
    worst = 0.0
    for k in range(len(ts) - 1, 0, -1):
        res = otd_ode_backprop(field, ys[k], ts[k], ts[k - 1], a, tab, cfg, norm_mode)
        a, a_th = res.grad_y0, a_th + res.grad_params
        worst = max(worst, float(np.max(np.abs(res.y0_reconstructed - ys[k - 1]))))
        n_acc += res.n_accepted
        n_rej += res.n_rejected
    return AdjointResult(a, a_th, ys[0], n_acc, n_rej, worst)


def otd_cde_backprop(
    field: VectorField,
    path,
    yT,
    dL_dyT,
    t0: float | None = None,
    tT: float | None = None,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    norm_mode: str | None = None,
    exclude_y: bool = False,
) -> AdjointResult:
    """Adjoint of ``dy = f(y) dx`` via the ODE ``dy/dt = f(y) dx/dt``.

    ``field`` outputs the flat ``d_y * d_x`` matrix. Derivative breaks of the
    path are passed to the solver as jumps.
    """
    from .paths import cde_to_ode

    g = cde_to_ode(field, path)
    t0 = path.t_start if t0 is None else t0
    tT = path.t_end if tT is None else tT
    lo, hi = min(t0, tT), max(t0, tT)
    jumps = [j for j in g.jumps if lo < j < hi]
    return otd_ode_backprop(g, yT, tT, t0, dL_dyT, tab, cfg, norm_mode, exclude_y, jumps)


def otd_sde_backprop(
    f: SdeField,
    source: BrownianSource,
    yT,
    dL_dyT,
    t0: float,
    tT: float,
    dt: float,
    method: str = "heun",
) -> AdjointResult:
    """Backward Stratonovich adjoint SDE with the forward pass's Brownian increments.

    Integrates ``[y, a_y, a_theta]`` from tT to t0 with the Stratonovich Heun
    scheme. ``a_theta`` is ordered as drift parameters then diffusion parameters.
    """
    if method in ("euler_maruyama", "milstein"):
        raise UnsupportedNoiseError("continuous SDE adjoints need a Stratonovich stepper")
    if method != "heun":
        raise ConfigurationError(f"unknown adjoint SDE method {method!r}; valid: ['heun']")
    d = f.d_y
    m1, m2 = f.drift.params.size, f.diffusion.params.size
    n = int(round((tT - t0) / dt))
    if n < 1 or abs(n * dt - (tT - t0)) > 1e-9 * abs(tT - t0):
        raise ContractError("dt must divide [t0, tT] into whole steps")
    grid = t0 + (tT - t0) * np.arange(n + 1) / n

    def incr(t, Y, h, dW):
        y, a = Y[..., :d], Y[..., d:2 * d]
        mu, (gmy, gmp) = f.drift.value_and_vjp(t, y, a, check=False)
        sig, (gsy, gsp) = f.diffusion.value_and_vjp(t, y, f.noise_cotangent(a, dW), check=False)
        dy = mu * h + f.noise(sig, dW)
        da = -(gmy * h + gsy)
        dth = -np.concatenate([gmp * h, gsp])
        return dy, da, dth

    y = np.asarray(yT, dtype=float)
    a = np.asarray(dL_dyT, dtype=float)
    th = np.zeros(m1 + m2)
    for k in range(n, 0, -1):
        t, s = grid[k], grid[k - 1]
        h = s - t
        dW = -source.increment(s, t)
        Y = np.concatenate([y, a], axis=-1)
        k1 = incr(t, Y, h, dW)
        Yp = np.concatenate([y + k1[0], a + k1[1]], axis=-1)
        k2 = incr(s, Yp, h, dW)
        y = y + 0.5 * (k1[0] + k2[0])
        a = a + 0.5 * (k1[1] + k2[1])
        th = th + 0.5 * (k1[2] + k2[2])
    return AdjointResult(a, th, y, n, 0)


# ---------------------------------------------------------------- forward sensitivity


class _SensitivityField(VectorField):
    def __init__(self, field: VectorField):
        d, m = field.dim_in, field.params.size
        size = d + d * d + d * m
        super().__init__(size, size)
        self.field, self.d, self.m = field, d, m
        self.time_dependent = True

    def _eval(self, t, Z):
        d, m, f = self.d, self.m, self.field
        y = Z[:d]
        Jy = Z[d:d + d * d].reshape(d, d)
        Jt = Z[d + d * d:].reshape(d, m)
        dJy = np.stack([f.jvp(t, y, Jy[:, i], check=False) for i in range(d)], axis=1)
        eye = np.eye(m)
        dJt = (np.stack([f.jvp(t, y, Jt[:, k], eye[k], check=False) for k in range(m)], axis=1)
               if m else np.zeros((d, 0)))
        return np.concatenate([f(t, y, check=False), dJy.ravel(), dJt.ravel()])


def forward_sensitivity(field: VectorField, y0, t0: float, t1: float,
                        tab: ButcherTableau = DOPRI5, cfg: ControllerConfig | None = None,
                        fixed_dt: float | None = None):
    """Returns ``(J_y, J_theta)`` = (dy(t1)/dy0, dy(t1)/dtheta)."""
    d, m = field.dim_in, field.params.size
    y0 = np.asarray(y0, dtype=float)
    if t0 == t1:
        return np.eye(d), np.zeros((d, m))
    Z0 = np.concatenate([y0, np.eye(d).ravel(), np.zeros(d * m)])
    sol = integrate(_SensitivityField(field), Z0, t0, t1, tab, cfg, fixed_dt=fixed_dt, record=False)
    Z = sol.y_final
    return Z[d:d + d * d].reshape(d, d), Z[d + d * d:].reshape(d, m)
