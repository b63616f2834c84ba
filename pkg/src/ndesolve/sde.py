"""Fixed-step SDE solvers and a strong-convergence harness.

Interpretation belongs to the stepper: Euler-Maruyama and Milstein are Ito
schemes; Heun and reversible Heun converge to the Stratonovich solution.
States may be batched as ``(n_paths, d_y)`` with increments ``(n_paths, d_w)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .brownian import BrownianInterval, BrownianSource
from .errors import ConfigurationError, ContractError, UnsupportedNoiseError
from .reversible import RevHeunState
from .vectorfield import VectorField

__all__ = [
    "NOISE_KINDS",
    "SdeField",
    "euler_maruyama_step",
    "stratonovich_heun_step",
    "milstein_step",
    "revheun_sde_init",
    "revheun_sde_step",
    "revheun_sde_reverse",
    "SDE_STEPPERS",
    "ITO_STEPPERS",
    "sde_solve",
    "StrongOrderResult",
    "strong_order_estimate",
]

NOISE_KINDS = ("general", "diagonal", "additive", "scalar")


class SdeField:
    """Drift/diffusion pair.

    Diffusion output layouts:

    * ``general``: flat ``d_y * d_w`` matrix, noise term ``sigma @ dW``;
    * ``diagonal``: vector of length ``d_y = d_w``, noise term ``sigma * dW``;
    * ``scalar``: vector of length ``d_y`` with ``d_w = 1``;
    * ``additive``: either of the first two layouts, and sigma must not depend on y.
    """

    def __init__(self, drift: VectorField, diffusion: VectorField, noise_kind: str = "general",
                 d_w: int | None = None):
        if noise_kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {noise_kind!r}; valid: {list(NOISE_KINDS)}")
        d_y = drift.dim_in
        if drift.dim_out != d_y or diffusion.dim_in != d_y:
            raise ContractError("drift must map R^d to R^d and diffusion must take R^d")
        self.drift, self.diffusion, self.noise_kind = drift, diffusion, noise_kind
        self.d_y = d_y
        if noise_kind == "scalar":
            layout, d_w = "scalar", 1
        elif noise_kind == "diagonal":
            layout, d_w = "diagonal", d_y
        elif noise_kind == "general":
            if d_w is None:
                if diffusion.dim_out % d_y:
                    raise ContractError("general diffusion output must be d_y * d_w")
                d_w = diffusion.dim_out // d_y
            layout = "matrix"
        else:  # additive
            if d_w is not None and diffusion.dim_out == d_y * d_w:
                layout = "matrix"
            elif diffusion.dim_out == d_y:
                layout, d_w = "diagonal", d_y
            else:
                raise ContractError("additive diffusion must be a d_y vector or a flat d_y*d_w matrix")
        expected = {"matrix": d_y * d_w, "diagonal": d_y, "scalar": d_y}[layout]
        if diffusion.dim_out != expected:
            raise ContractError(f"diffusion output size {diffusion.dim_out} != {expected}")
        self.layout, self.d_w = layout, int(d_w)

    @property
    def params_dim(self):
        return self.drift.params.size + self.diffusion.params.size

    def mu(self, t, y):
        return self.drift(t, y, check=False)

    def sigma(self, t, y):
        return self.diffusion(t, y, check=False)

    def noise(self, sigma, dW):
        """sigma . dW for the field's layout."""
        if self.layout == "matrix":
            S = sigma.reshape(sigma.shape[:-1] + (self.d_y, self.d_w))
            return np.einsum("...ij,...j->...i", S, dW)
        if self.layout == "diagonal":
            return sigma * dW
        return sigma * dW[..., :1]

    def noise_cotangent(self, a, dW):
        """Cotangent on the flat diffusion output for the scalar loss <a, sigma . dW>."""
        if self.layout == "matrix":
            return (a[..., :, None] * dW[..., None, :]).reshape(a.shape[:-1] + (-1,))
        if self.layout == "diagonal":
            return a * dW
        return a * dW[..., :1]


# ---------------------------------------------------------------- steppers


def euler_maruyama_step(f: SdeField, t, y, dt, dW):
    return y + f.mu(t, y) * dt + f.noise(f.sigma(t, y), dW)


def stratonovich_heun_step(f: SdeField, t, y, dt, dW):
    mu0, s0 = f.mu(t, y), f.sigma(t, y)
    y_pred = y + mu0 * dt + f.noise(s0, dW)
    mu1, s1 = f.mu(t + dt, y_pred), f.sigma(t + dt, y_pred)
    return y + 0.5 * (mu0 + mu1) * dt + 0.5 * (f.noise(s0, dW) + f.noise(s1, dW))


def milstein_step(f: SdeField, t, y, dt, dW):
    """Ito Milstein for scalar, diagonal or additive noise.

    The correction 0.5 * (J_sigma sigma) * (dW^2 - dt) uses one jvp with tangent
    sigma. For diagonal noise this assumes sigma_k depends on y_k only.
    """
    if f.noise_kind == "general":
        raise UnsupportedNoiseError("Milstein needs scalar, diagonal or additive noise")
    mu, sig = f.mu(t, y), f.sigma(t, y)
    y1 = y + mu * dt + f.noise(sig, dW)
    if f.noise_kind == "additive":
        return y1
    dsig = f.diffusion.jvp(t, y, sig, check=False)
    dw = dW if f.layout == "diagonal" else dW[..., :1]
    return y1 + 0.5 * dsig * (dw * dw - dt)


def revheun_sde_init(f: SdeField, t0, y0) -> RevHeunState:
    y0 = np.array(y0, dtype=float)
    return RevHeunState(float(t0), y0, y0.copy(), f.mu(t0, y0), f.sigma(t0, y0))


def revheun_sde_step(f: SdeField, s: RevHeunState, dt, dW) -> RevHeunState:
    t1 = s.t + dt
    y_hat = 2.0 * s.y - s.y_hat + s.f_cached * dt + f.noise(s.g_cached, dW)
    mu1, s1 = f.mu(t1, y_hat), f.sigma(t1, y_hat)
    y = s.y + 0.5 * (s.f_cached + mu1) * dt + 0.5 * (f.noise(s.g_cached, dW) + f.noise(s1, dW))
    return RevHeunState(t1, y, y_hat, mu1, s1)


def revheun_sde_reverse(f: SdeField, s_next: RevHeunState, dt, dW) -> RevHeunState:
    t0 = s_next.t - dt
    y_hat = 2.0 * s_next.y - s_next.y_hat - s_next.f_cached * dt - f.noise(s_next.g_cached, dW)
    mu0, s0 = f.mu(t0, y_hat), f.sigma(t0, y_hat)
    y = s_next.y - 0.5 * (s_next.f_cached + mu0) * dt - 0.5 * (f.noise(s_next.g_cached, dW) + f.noise(s0, dW))
    return RevHeunState(t0, y, y_hat, mu0, s0)


SDE_STEPPERS = {
    "euler_maruyama": euler_maruyama_step,
    "milstein": milstein_step,
    "heun": stratonovich_heun_step,
    "reversible_heun": None,  # stateful, handled in sde_solve
}
ITO_STEPPERS = ("euler_maruyama", "milstein")


def _grid(t0, t1, dt):
    n = int(round((t1 - t0) / dt))
    if n < 1 or abs(n * dt - (t1 - t0)) > 1e-9 * abs(t1 - t0):
        raise ContractError("dt must divide the interval into a whole number of steps")
    return t0 + (t1 - t0) * np.arange(n + 1) / n


def sde_solve(method: str, f: SdeField, y0, t0: float, t1: float, dt: float,
              source: BrownianSource, return_path: bool = False):
    """Fixed-step solve on the uniform grid; increments come from ``source``."""
    if method not in SDE_STEPPERS:
        raise ConfigurationError(f"unknown SDE method {method!r}; valid: {sorted(SDE_STEPPERS)}")
    ts = _grid(t0, t1, dt)
    y = np.array(y0, dtype=float)
    path = [y]
    if method == "reversible_heun":
        state = revheun_sde_init(f, ts[0], y)
        for a, b in zip(ts[:-1], ts[1:]):
            state = revheun_sde_step(f, state, b - a, source.increment(a, b))
            if return_path:
                path.append(state.y)
        y = state.y
    else:
        step = SDE_STEPPERS[method]
        for a, b in zip(ts[:-1], ts[1:]):
            y = step(f, a, y, b - a, source.increment(a, b))
            if return_path:
                path.append(y)
    if return_path:
        return ts, np.stack(path)
    return y


@dataclass
class StrongOrderResult:
    slope: float
    dts: np.ndarray
    errors: np.ndarray
    saturated: bool


def strong_order_estimate(
    method: str,
    f: SdeField,
    y0,
    dts: Sequence[float],
    n_paths: int,
    seed: int = 0,
    exact: Callable | None = None,
    reference_dt: float | None = None,
    t0: float = 0.0,
    t1: float = 1.0,
) -> StrongOrderResult:
    """Slope of log E|y_N - y(T)| against log dt.

    All step sizes share one Brownian Interval whose rows are the independent
    paths. The reference is ``exact(T, W_T - W_0)`` when given, otherwise a
    solve with ``reference_dt`` and the same method.
    """
    if exact is None and reference_dt is None:
        raise ContractError("need an exact solution or a reference step size")
    source = BrownianInterval(t0, t1, shape=(n_paths, f.d_w), seed=seed)
    y0b = np.broadcast_to(np.asarray(y0, dtype=float), (n_paths, f.d_y)).copy()
    if exact is not None:
        ref = exact(t1, source.increment(t0, t1))
    else:
        ref = sde_solve(method, f, y0b, t0, t1, reference_dt, source)
    errors = []
    for dt in dts:
        y = sde_solve(method, f, y0b, t0, t1, dt, source)
        errors.append(np.mean(np.linalg.norm(np.atleast_2d(y - ref).reshape(n_paths, -1), axis=1)))
    errors = np.array(errors)
    dts = np.asarray(dts, dtype=float)
    if np.max(errors) < 1e-12:
        return StrongOrderResult(float("nan"), dts, errors, True)
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    return StrongOrderResult(float(slope), dts, errors, False)
