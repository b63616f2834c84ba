"""Explicit Runge-Kutta stepping with fixed or adaptive step-size control.

The adaptive loop follows the usual embedded-pair recipe: a candidate step
comes with an error estimate, the error ratio ``r`` is the RMS of the error
divided by ``atol + rtol * max(|y_prev|, |y_cand|)``, the step is accepted when
``r <= 1``, and the next step is scaled by
``clamp(safety * r**(-1/order), dfactor, ifactor)``.

Jump points and save points are hit exactly by clipping the step. Whenever a
step ends on such a point, stage evaluations that would land on it are moved
to the adjacent float on the near side, so the field is sampled as a left
limit there.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BlowUpError, ConfigurationError, ContractError, StepBudgetExceeded
from .vectorfield import VectorField

__all__ = [
    "ButcherTableau",
    "EULER",
    "HEUN",
    "MIDPOINT",
    "RK4",
    "DOPRI5",
    "TABLEAUX",
    "get_tableau",
    "ControllerConfig",
    "StepRecord",
    "Solution",
    "StepResult",
    "rk_step",
    "rms",
    "error_ratio",
    "next_dt_factor",
    "initial_step",
    "integrate",
    "hypersolver_step",
    "hypersolver_residual",
]


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    b_err: np.ndarray | None = None

    def __post_init__(self):
        a, b, c = (np.asarray(x, dtype=float) for x in (self.a, self.b, self.c))
        s = b.size
        if a.shape != (s, s) or c.size != s:
            raise ConfigurationError(f"{self.name}: inconsistent tableau shapes")
        if np.any(np.triu(a) != 0):
            raise ConfigurationError(f"{self.name}: explicit tableaux need a strictly lower-triangular a")
        if not np.allclose(a.sum(axis=1), c, atol=1e-14):
            raise ConfigurationError(f"{self.name}: c must equal the row sums of a")
        if abs(b.sum() - 1.0) > 1e-14:
            raise ConfigurationError(f"{self.name}: weights must sum to one")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if self.b_err is not None:
            object.__setattr__(self, "b_err", np.asarray(self.b_err, dtype=float))

    @property
    def stages(self) -> int:
        return self.b.size

    @property
    def adaptive(self) -> bool:
        return self.b_err is not None


EULER = ButcherTableau("euler", [[0.0]], [1.0], [0.0], 1)
HEUN = ButcherTableau("heun", [[0, 0], [1, 0]], [0.5, 0.5], [0, 1], 2, b_err=[1.0, 0.0])
MIDPOINT = ButcherTableau("midpoint", [[0, 0], [0.5, 0]], [0.0, 1.0], [0, 0.5], 2, b_err=[1.0, 0.0])
RK4 = ButcherTableau(
    "rk4",
    [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1, 0]],
    [1 / 6, 1 / 3, 1 / 3, 1 / 6],
    [0, 0.5, 0.5, 1],
    4,
)
DOPRI5 = ButcherTableau(
    "dopri5",
    [
        [0, 0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    ],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    [0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1],
    5,
    b_err=[5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40],
)

TABLEAUX = {tab.name: tab for tab in (EULER, HEUN, MIDPOINT, RK4, DOPRI5)}


def get_tableau(name: str) -> ButcherTableau:
    try:
        return TABLEAUX[name]
    except KeyError:
        raise ConfigurationError(f"unknown tableau {name!r}; valid: {sorted(TABLEAUX)}") from None


@dataclass(frozen=True)
class ControllerConfig:
    rtol: float = 1e-3
    atol: float = 1e-6
    safety: float = 0.9
    ifactor: float = 10.0
    dfactor: float = 0.2
    norm_mode: str = "rms_full"
    max_steps: int = 100_000

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigurationError("rtol and atol must be positive")
        if self.ifactor <= 1 or not 0 < self.dfactor < 1:
            raise ConfigurationError("need ifactor > 1 and 0 < dfactor < 1")
        if self.norm_mode not in ("rms_full", "adjoint_seminorm"):
            raise ConfigurationError(
                f"unknown norm_mode {self.norm_mode!r}; valid: ['adjoint_seminorm', 'rms_full']"
            )


@dataclass
class StepRecord:
    """An accepted step. ``state`` is the solver state at the step start."""

    t: float
    dt: float
    y: np.ndarray
    left_limit: bool = False
    state: object = None


@dataclass
class Solution:
    ts: np.ndarray
    ys: np.ndarray
    step_records: list = dc_field(default_factory=list)
    n_accepted: int = 0
    n_rejected: int = 0
    n_fev: int = 0
    method: object = None
    # save index reached at the end of each accepted step (-1 if none)
    save_index_after_step: list = dc_field(default_factory=list)
    terminal_state: object = None

    @property
    def y_final(self) -> np.ndarray:
        return self.ys[-1]

    @property
    def dt_schedule(self) -> list:
        return [r.dt for r in self.step_records]


class StepResult(NamedTuple):
    y_next: np.ndarray
    y_err: np.ndarray | None
    stages: list


def stage_times(tab: ButcherTableau, t, dt, left_limit=False):
    times = [t + ci * dt for ci in tab.c]
    if dt < 0:
        # Piecewise fields use the right limit at breakpoints; a backward step
        # must see the piece below its starting time.
        times = [np.nextafter(t, t + dt) if ti == t else ti for ti in times]
    if left_limit:
        end = t + dt
        times = [np.nextafter(end, t) if ti == end else ti for ti in times]
    return times


def rk_step(tab: ButcherTableau, field: VectorField, t, y, dt, left_limit: bool = False) -> StepResult:
    """One explicit RK step; ``stages`` are the k_i (field values)."""
    if dt == 0:
        raise ContractError("dt must be non-zero")
    y = np.asarray(y, dtype=float)
    times = stage_times(tab, t, dt, left_limit)
    ks = []
    for i in range(tab.stages):
        z = y
        for j in range(i):
            if tab.a[i, j] != 0.0:
                z = z + (dt * tab.a[i, j]) * ks[j]
        ks.append(field(times[i], z, check=False))
    y_next = y + dt * sum(bi * k for bi, k in zip(tab.b, ks) if bi != 0.0)
    y_err = None
    if tab.b_err is not None:
        y_err = dt * sum((bi - ei) * k for bi, ei, k in zip(tab.b, tab.b_err, ks))
    return StepResult(y_next, y_err, ks)


def rms(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def error_ratio(y_prev, y_cand, y_err, cfg: ControllerConfig, mask=None) -> float:
    """RMS of y_err / SCALE over the entries selected by ``mask`` (all by default)."""
    y_prev, y_cand, y_err = (np.asarray(v, dtype=float).ravel() for v in (y_prev, y_cand, y_err))
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y_prev), np.abs(y_cand))
    ratio = y_err / scale
    if mask is not None:
        ratio = ratio[np.asarray(mask).ravel()]
    return rms(ratio)


def next_dt_factor(r: float, order: int, cfg: ControllerConfig) -> float:
    if r < 0 or order < 1:
        raise ContractError("need r >= 0 and order >= 1")
    if r == 0:
        return cfg.ifactor
    return float(min(cfg.ifactor, max(cfg.dfactor, cfg.safety * r ** (-1.0 / order))))


def initial_step(field: VectorField, t0, y0, direction, order, cfg: ControllerConfig, mask=None):
    """Two-trial starting step heuristic. Returns (|h|, evaluations used)."""
    def norm(v):
        v = np.asarray(v).ravel()
        return rms(v if mask is None else v[np.asarray(mask).ravel()])

    scale = cfg.atol + cfg.rtol * np.abs(y0)
    f0 = field(t0, y0, check=False)
    d0, d1 = norm(y0 / scale), norm(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = field(t0 + direction * h0, y1, check=False)
    d2 = norm((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1), 2


def _stops(t0, t1, jumps, save_ts):
    direction = 1.0 if t1 > t0 else -1.0
    lo, hi = min(t0, t1), max(t0, t1)
    pts = set()
    for p in list(jumps) + list(save_ts):
        p = float(p)
        if p < lo or p > hi:
            raise ContractError(f"point {p} lies outside the integration interval")
        if p != t0:
            pts.add(p)
    pts.add(float(t1))
    stops = sorted(pts, reverse=direction < 0)
    return direction, stops


def integrate(
    field: VectorField,
    y0,
    t0: float,
    t1: float,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    fixed_dt: float | None = None,
    jumps: Sequence[float] = (),
    save_ts: Sequence[float] | None = None,
    dt0: float | None = None,
    norm_mask=None,
    record: bool = True,
) -> Solution:
    """Solve dy/dt = f(t, y) from t0 to t1 (either direction).

    ``save_ts`` defaults to ``(t0, t1)``. ``norm_mask`` selects the state entries
    entering the error norm. ``fixed_dt`` gives the step magnitude of a
    fixed-step solve; otherwise the embedded error estimate drives the step.
    """
    cfg = cfg or ControllerConfig()
    t0, t1 = float(t0), float(t1)
    if t0 == t1:
        raise ContractError("t0 and t1 must differ")
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise BlowUpError("initial state is not finite")
    if save_ts is None:
        save_ts = (t0, t1)
    save_ts = [float(s) for s in save_ts]
    direction, stops = _stops(t0, t1, jumps, save_ts)
    if any(direction * (b - a) < 0 for a, b in zip(save_ts[:-1], save_ts[1:])):
        raise ContractError("save_ts must be ordered along the integration direction")
    jump_set = {float(j) for j in jumps} | {t1}
    save_lookup = {}
    for i, s in enumerate(save_ts):
        save_lookup.setdefault(s, []).append(i)

    adaptive = fixed_dt is None
    if adaptive and not tab.adaptive:
        raise ConfigurationError(f"tableau {tab.name!r} has no error estimate; pass fixed_dt")

    sol = Solution(ts=np.array(save_ts), ys=np.empty((len(save_ts),) + y.shape), method=tab)
    for i in save_lookup.get(t0, []):
        sol.ys[i] = y

    if fixed_dt is not None:
        if fixed_dt == 0:
            raise ContractError("fixed_dt must be non-zero")
        dt = direction * abs(float(fixed_dt))
    elif dt0 is not None:
        dt = direction * abs(float(dt0))
    else:
        h, used = initial_step(field, t0, y, direction, tab.order, cfg, norm_mask)
        sol.n_fev += used
        dt = direction * min(h, abs(t1 - t0))

    t = t0
    stop_i = 0
    consecutive_bad = 0
    while True:
        next_stop = stops[stop_i]
        dt_try = dt
        clipped = direction * (t + dt_try - next_stop) >= -1e-9 * abs(dt_try)
        if clipped:
            dt_try = next_stop - t
            if dt_try == 0:
                raise BlowUpError(f"zero step at t={t}")
        left = clipped and next_stop in jump_set
        step = rk_step(tab, field, t, y, dt_try, left_limit=left)
        sol.n_fev += tab.stages
        finite = bool(np.all(np.isfinite(step.y_next)))
        if adaptive:
            r = error_ratio(y, step.y_next, step.y_err, cfg, norm_mask) if finite else np.inf
            accept = r <= 1.0
        else:
            accept = True
            if not finite:
                raise BlowUpError(f"non-finite state at t={t + dt_try}")

        if accept:
            consecutive_bad = 0
            if record:
                sol.step_records.append(StepRecord(t, dt_try, y, left))
            sol.n_accepted += 1
            y = step.y_next
            t = next_stop if clipped else t + dt_try
            saved = -1
            if clipped:
                for i in save_lookup.get(next_stop, []):
                    sol.ys[i] = y
                    saved = i
                stop_i += 1
            if record:
                sol.save_index_after_step.append(saved)
            if clipped and next_stop == t1:
                break
        else:
            sol.n_rejected += 1
            consecutive_bad = consecutive_bad + 1 if not finite else 0
            if consecutive_bad > 30:
                raise BlowUpError(f"repeated non-finite steps near t={t}")

        if sol.n_accepted + sol.n_rejected > cfg.max_steps:
            raise StepBudgetExceeded(f"more than {cfg.max_steps} steps; stopped at t={t}")
        if adaptive:
            factor = next_dt_factor(r, tab.order, cfg) if np.isfinite(r) else cfg.dfactor
            dt = dt_try * factor
            if abs(dt) < 1e-14 * max(1.0, abs(t)):
                raise BlowUpError(f"step size underflow at t={t}")
    return sol


# ---------------------------------------------------------------- hypersolvers


def hypersolver_step(base: ButcherTableau, correction: VectorField, field: VectorField,
                     t, y, dt, q: int | None = None) -> np.ndarray:
    """Base step plus a learnt correction g(t, y, dt) scaled by dt**(q+1).

    ``correction`` takes the concatenation ``(t, y, dt)`` as its state.
    """
    y = np.asarray(y, dtype=float)
    q = base.order if q is None else q
    if correction.dim_in != y.shape[-1] + 2 or correction.dim_out != y.shape[-1]:
        raise ContractError("correction must map (t, y, dt) of size d+2 to size d")
    y_base = rk_step(base, field, t, y, dt).y_next
    inp = np.concatenate([[t], y, [dt]])
    return y_base + correction(t, inp) * dt ** (q + 1)


def hypersolver_residual(y_prev, y_next_true, t, dt, base: ButcherTableau, field: VectorField,
                         q: int | None = None) -> np.ndarray:
    """Training target R = (y_next - y_prev - psi dt) / dt**(q+1)."""
    if dt == 0:
        raise ContractError("dt must be non-zero")
    q = base.order if q is None else q
    y_prev = np.asarray(y_prev, dtype=float)
    y_base = rk_step(base, field, t, y_prev, dt).y_next
    return (np.asarray(y_next_true, dtype=float) - y_base) / dt ** (q + 1)
