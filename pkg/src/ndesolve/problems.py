"""Named test problems with closed-form oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .paths import ControlPath, TimeSeries, augment_series, build_interpolation
from .sde import SdeField
from .vectorfield import FunctionField, LinearField, ScalarLinearField, VectorField

__all__ = [
    "OdeProblem",
    "SdeProblem",
    "CdeProblem",
    "PROBLEMS",
    "get_problem",
    "value_and_integral_field",
    "linear_decay",
    "rotation",
    "gbm_ito",
    "gbm_strat",
    "ou_timedep",
    "noncommutative",
    "value_and_integral_cde",
]


@dataclass
class OdeProblem:
    name: str
    field: VectorField
    y0: np.ndarray
    t0: float
    t1: float
    exact: Callable  # t -> y(t)
    kind: str = "ode"


@dataclass
class SdeProblem:
    name: str
    sde: SdeField
    y0: np.ndarray
    t0: float
    t1: float
    interpretation: str  # "ito" or "stratonovich"
    exact: Callable | None = None  # (T, W_T - W_t0) -> y(T), batched over leading axes
    reference_dt: float | None = None
    mean: Callable | None = None  # t -> E[y(t)]
    variance: Callable | None = None
    kind: str = "sde"


@dataclass
class CdeProblem:
    name: str
    field: VectorField  # flat d_y * d_x output
    path: ControlPath
    y0: np.ndarray
    t0: float
    t1: float
    exact: Callable  # () -> y(t1)
    kind: str = "cde"


def linear_decay(lam: float = -1.0, y0: float = 1.0, t1: float = 1.0) -> OdeProblem:
    return OdeProblem("linear_decay", ScalarLinearField(lam, 1), np.array([y0]), 0.0, t1,
                      lambda t: np.array([y0 * np.exp(lam * t)]))


def rotation(omega: float = 1.0, t1: float = 1.0) -> OdeProblem:
    A = np.array([[0.0, omega], [-omega, 0.0]])
    return OdeProblem("rotation", LinearField(A), np.array([1.0, 0.0]), 0.0, t1,
                      lambda t: np.array([np.cos(omega * t), -np.sin(omega * t)]))


def _gbm(a, b):
    return SdeField(ScalarLinearField(a, 1), ScalarLinearField(b, 1), "diagonal")


def gbm_ito(a: float = 0.5, b: float = 0.8, y0: float = 1.0, t1: float = 1.0) -> SdeProblem:
    return SdeProblem(
        "gbm_ito", _gbm(a, b), np.array([y0]), 0.0, t1, "ito",
        exact=lambda T, W: y0 * np.exp((a - 0.5 * b * b) * T + b * W),
        mean=lambda t: y0 * np.exp(a * t),
        variance=lambda t: y0 ** 2 * np.exp(2 * a * t) * (np.exp(b * b * t) - 1),
    )


def gbm_strat(a: float = 0.5, b: float = 0.8, y0: float = 1.0, t1: float = 1.0) -> SdeProblem:
    return SdeProblem(
        "gbm_strat", _gbm(a, b), np.array([y0]), 0.0, t1, "stratonovich",
        exact=lambda T, W: y0 * np.exp(a * T + b * W),
        mean=lambda t: y0 * np.exp((a + 0.5 * b * b) * t),
    )


def ou_timedep(sigma: float = 0.5, y0: float = 1.0, t1: float = 1.0) -> SdeProblem:
    """dy = (sin t - y) dt + sigma dW: additive noise, time-dependent drift."""
    drift = FunctionField(
        lambda t, y, p: np.sin(t) - y,
        lambda t, y, p: np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)),
        1, 1,
    )
    diff = FunctionField(
        lambda t, y, p: np.full(y.shape, sigma),
        lambda t, y, p: np.zeros(y.shape[:-1] + (1, 1)),
        1, 1, time_dependent=False,
    )
    return SdeProblem(
        "ou_timedep", SdeField(drift, diff, "additive"), np.array([y0]), 0.0, t1, "stratonovich",
        reference_dt=2.0 ** -12,
        mean=lambda t: y0 * np.exp(-t) + 0.5 * (np.sin(t) - np.cos(t) + np.exp(-t)),
        variance=lambda t: 0.5 * sigma ** 2 * (1 - np.exp(-2 * t)),
    )


def noncommutative(t1: float = 1.0) -> SdeProblem:
    """dy1 = dW1, dy2 = y1 dW2: general noise whose vector fields do not commute."""
    drift = FunctionField(lambda t, y, p: np.zeros_like(y),
                          lambda t, y, p: np.zeros(y.shape[:-1] + (2, 2)), 2, 2)

    def sig(t, y, p):
        out = np.zeros(y.shape[:-1] + (4,))
        out[..., 0] = 1.0
        out[..., 3] = y[..., 0]
        return out

    def jac(t, y, p):
        J = np.zeros(y.shape[:-1] + (4, 2))
        J[..., 3, 0] = 1.0
        return J

    return SdeProblem("noncommutative", SdeField(drift, FunctionField(sig, jac, 2, 4), "general", 2),
                      np.zeros(2), 0.0, t1, "stratonovich", reference_dt=2.0 ** -12)


def value_and_integral_field(theta=(1.0, 1.0)) -> FunctionField:
    """f(y) = [[0, th0], [th1 * y0, 0]] for the control x = (t, x1).

    With y(0) = (x1(0), 0) and th = (1, 1) this gives y(T) = (x1(T), int_0^T x1 dt).
    """

    def fn(t, y, p):
        out = np.zeros(y.shape[:-1] + (4,))
        out[..., 1] = p[0]
        out[..., 2] = p[1] * y[..., 0]
        return out

    def jac_y(t, y, p):
        J = np.zeros(y.shape[:-1] + (4, 2))
        J[..., 2, 0] = p[1]
        return J

    def jac_p(t, y, p):
        J = np.zeros(y.shape[:-1] + (4, 2))
        J[..., 1, 0] = 1.0
        J[..., 2, 1] = y[..., 0]
        return J

    return FunctionField(fn, jac_y, 2, 4, np.asarray(theta, float), jac_p, time_dependent=False)


def value_and_integral_cde(n: int = 40, t1: float = 6.0, scheme: str = "hermite_cubic_bd",
                           knot_rule: str = "s_eq_t", signal: Callable = np.sin) -> CdeProblem:
    ts = np.linspace(0.0, t1, n + 1)
    series = augment_series(TimeSeries(ts, signal(ts)[:, None], ["x"]), include_time=True)
    path = build_interpolation(series, scheme, knot_rule)
    s0, s1 = path.t_start, path.t_end
    x0 = path.evaluate(s0)[1]

    def exact():
        # dy0 = dx1 and dy1 = y0 dt: exact for the interpolated control
        t_ = path.breaks[0]
        integral = 0.0
        for a, b in zip(t_[:-1], t_[1:]):
            # int y0 dt over [a, b] = int x1(s) t'(s) ds; Gauss-Legendre is exact for these degrees
            nodes, w = np.polynomial.legendre.leggauss(6)
            s = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            vals = np.array([path.evaluate(si)[1] * path.derivative(si)[0] for si in s])
            integral += 0.5 * (b - a) * np.dot(w, vals)
        return np.array([path.evaluate(s1)[1], integral])

    return CdeProblem("value_and_integral_cde", value_and_integral_field(), path,
                      np.array([x0, 0.0]), s0, s1, exact)


PROBLEMS = {
    "linear_decay": linear_decay,
    "rotation": rotation,
    "gbm_ito": gbm_ito,
    "gbm_strat": gbm_strat,
    "ou_timedep": ou_timedep,
    "noncommutative": noncommutative,
    "value_and_integral_cde": value_and_integral_cde,
}


def get_problem(name: str, **kwargs):
    if name not in PROBLEMS:
        raise ConfigurationError(f"unknown problem {name!r}; valid: {sorted(PROBLEMS)}")
    return PROBLEMS[name](**kwargs)
