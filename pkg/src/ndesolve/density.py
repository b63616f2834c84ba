"""Continuous normalising flows: divergence estimates and log-densities.

The log-density of ``x`` under the pushforward of a base density by the flow
of ``f`` over [t0, T] is ``log p0(y(t0)) - int_{t0}^{T} div f(t, y(t)) dt``
where ``y(T) = x``. Both the state and the divergence integral are solved
backward from T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .brownian import Seed
from .errors import ConfigurationError
from .odecore import DOPRI5, ButcherTableau, ControllerConfig, integrate
from .vectorfield import VectorField

__all__ = [
    "TraceMode",
    "divergence_exact",
    "divergence_hutchinson",
    "draw_eps",
    "CnfField",
    "cnf_augmented_field",
    "std_normal_logdensity",
    "cnf_logprob",
]


@dataclass(frozen=True)
class TraceMode:
    kind: str = "exact"
    eps_dist: str = "rademacher"
    n_samples: int = 1
    seed: int = 0
    per_batch: bool = False  # independent eps for every batch element

    def __post_init__(self):
        if self.kind not in ("exact", "hutchinson"):
            raise ConfigurationError(f"unknown trace kind {self.kind!r}; valid: ['exact', 'hutchinson']")
        if self.eps_dist not in ("rademacher", "gaussian"):
            raise ConfigurationError(f"unknown eps distribution {self.eps_dist!r}; valid: ['gaussian', 'rademacher']")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be at least 1")


def divergence_exact(field: VectorField, t, y) -> np.ndarray | float:
    """Trace of df/dy from ``d`` unit-cotangent vjps."""
    y = np.asarray(y, dtype=float)
    d = field.dim_in
    total = np.zeros(y.shape[:-1])
    for k in range(d):
        e = np.zeros_like(y)
        e[..., k] = 1.0
        total = total + field.vjp(t, y, e, check=False).grad_y[..., k]
    return total if total.ndim else float(total)


def draw_eps(mode: TraceMode, batch_shape: tuple, d: int) -> np.ndarray:
    """Noise of shape ``(n_samples, *batch_shape, d)`` (batch axes of size 1 unless ``per_batch``)."""
    shape = (mode.n_samples,) + (batch_shape if mode.per_batch else (1,) * len(batch_shape)) + (d,)
    rng = Seed.from_int(mode.seed).generator()
    if mode.eps_dist == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    return rng.standard_normal(shape)


def divergence_hutchinson(field: VectorField, t, y, mode: TraceMode, eps: np.ndarray | None = None):
    """Mean over samples of ``eps^T (df/dy) eps``; pass ``eps`` to hold it fixed across calls."""
    y = np.asarray(y, dtype=float)
    if eps is None:
        eps = draw_eps(mode, y.shape[:-1], field.dim_in)
    shape = (eps.shape[0],) + y.shape
    e = np.broadcast_to(eps, shape)
    g = field.vjp(t, np.broadcast_to(y, shape), e, check=False).grad_y
    total = np.mean(np.sum(g * e, axis=-1), axis=0)
    return total if total.ndim else float(total)


class CnfField(VectorField):
    """State ``(y, l)`` evolving by ``(f(t, y), -div f(t, y))``."""

    def __init__(self, field: VectorField, mode: TraceMode, eps: np.ndarray | None = None):
        if field.dim_in != field.dim_out:
            raise ConfigurationError("a flow field must map R^d to R^d")
        d = field.dim_in
        super().__init__(d + 1, d + 1)
        self.field, self.mode, self.d, self.eps = field, mode, d, eps
        self.time_dependent = True

    def divergence(self, t, y):
        if self.mode.kind == "exact":
            return divergence_exact(self.field, t, y)
        return divergence_hutchinson(self.field, t, y, self.mode, self.eps)

    def _eval(self, t, Y):
        y = Y[..., : self.d]
        div = np.asarray(self.divergence(t, y))
        return np.concatenate([self.field(t, y, check=False), -div[..., None]], axis=-1)


def cnf_augmented_field(field: VectorField, mode: TraceMode | None = None, batch_shape: tuple = ()) -> CnfField:
    """Augmented field; Hutchinson noise is drawn here once and reused at every evaluation."""
    mode = mode or TraceMode()
    eps = draw_eps(mode, batch_shape, field.dim_in) if mode.kind == "hutchinson" else None
    return CnfField(field, mode, eps)


def std_normal_logdensity(y) -> np.ndarray | float:
    y = np.asarray(y, dtype=float)
    out = -0.5 * np.sum(y * y, axis=-1) - 0.5 * y.shape[-1] * np.log(2 * np.pi)
    return out if np.ndim(out) else float(out)


def cnf_logprob(
    field: VectorField,
    x,
    base_logdensity: Callable = std_normal_logdensity,
    t0: float = 0.0,
    T: float = 1.0,
    tab: ButcherTableau = DOPRI5,
    cfg: ControllerConfig | None = None,
    mode: TraceMode | None = None,
    fixed_dt: float | None = None,
):
    """log p_T(x); ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    g = cnf_augmented_field(field, mode, x.shape[:-1])
    Y = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    sol = integrate(g, Y, T, t0, tab=tab, cfg=cfg, fixed_dt=fixed_dt, record=False)
    Y0 = sol.y_final
    return base_logdensity(Y0[..., : field.dim_in]) - Y0[..., -1]
