"""Vector fields f(t, y) bundled with their vector-Jacobian and Jacobian-vector products.

Every field carries a flat parameter vector ``params`` (possibly empty). States
may carry leading batch axes: ``y`` has shape ``(..., dim_in)``. Parameter
gradients are summed over batch axes, which is the gradient of the summed loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractError, NumericInputError

__all__ = [
    "FieldSpec",
    "VjpResult",
    "FdReport",
    "VectorField",
    "LinearField",
    "ScalarLinearField",
    "ConstantField",
    "FunctionField",
    "MLPParams",
    "MLP",
    "mlp_init",
    "mlp",
    "fd_check",
    "ACTIVATIONS",
]


@dataclass(frozen=True)
class FieldSpec:
    dim_in: int
    dim_out: int
    time_dependent: bool
    params_dim: int


class VjpResult(NamedTuple):
    grad_y: np.ndarray
    grad_params: np.ndarray


@dataclass(frozen=True)
class FdReport:
    max_rel_err_y: float
    max_rel_err_params: float


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{name} contains NaN or Inf")


class VectorField:
    """Base class. Subclasses implement ``_eval``, ``_vjp`` and ``_jvp``.

    The public methods validate shapes and finiteness; solvers call them with
    ``check=False`` in inner loops, where a non-finite stage is handled as a
    step failure instead of an exception.
    """

    time_dependent = False

    def __init__(self, dim_in: int, dim_out: int, params=()):
        if dim_in < 1 or dim_out < 1:
            raise ConfigurationError("field dimensions must be positive")
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self._params = np.array(params, dtype=float).ravel()
        self._params.setflags(write=False)

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def spec(self) -> FieldSpec:
        return FieldSpec(self.dim_in, self.dim_out, self.time_dependent, self._params.size)

    def with_params(self, params) -> "VectorField":
        params = np.asarray(params, dtype=float).ravel()
        if params.size != self._params.size:
            raise ContractError(f"expected {self._params.size} parameters, got {params.size}")
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new._params = params.copy()
        new._params.setflags(write=False)
        new._on_params_changed()
        return new

    def _on_params_changed(self):
        pass

    # public API

    def __call__(self, t, y, check: bool = True) -> np.ndarray:
        if check:
            y = self._state(y)
        return self._eval(t, y)

    def vjp(self, t, y, cotangent, check: bool = True) -> VjpResult:
        if check:
            y = self._state(y)
            cotangent = np.asarray(cotangent, dtype=float)
            if cotangent.shape[-1:] != (self.dim_out,):
                raise ContractError(f"cotangent must end in dimension {self.dim_out}")
        gy, gp = self._vjp(t, y, cotangent)
        return VjpResult(gy, gp)

    def jvp(self, t, y, tangent, tangent_params=None, check: bool = True) -> np.ndarray:
        if check:
            y = self._state(y)
            tangent = np.asarray(tangent, dtype=float)
            if tangent.shape[-1:] != (self.dim_in,):
                raise ContractError(f"tangent must end in dimension {self.dim_in}")
            if tangent_params is not None:
                tangent_params = np.asarray(tangent_params, dtype=float).ravel()
                if tangent_params.size != self._params.size:
                    raise ContractError("parameter tangent has the wrong length")
        return self._jvp(t, y, tangent, tangent_params)

    def value_and_vjp(self, t, y, cotangent, check: bool = True):
        return self(t, y, check=check), self.vjp(t, y, cotangent, check=check)

    def _state(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1:] != (self.dim_in,):
            raise ContractError(f"state must end in dimension {self.dim_in}, got shape {y.shape}")
        _check_finite("state", y)
        return y

    # subclass hooks

    def _eval(self, t, y):
        raise NotImplementedError

    def _vjp(self, t, y, cot):
        raise NotImplementedError

    def _jvp(self, t, y, tangent, tangent_params):
        raise NotImplementedError


def _batch_sum(x, trailing):
    return x.reshape((-1,) + x.shape[x.ndim - trailing:]).sum(axis=0)


class LinearField(VectorField):
    """f(t, y) = A y with params = A (row-major)."""

    def __init__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        super().__init__(A.shape[1], A.shape[0], A)
        self._on_params_changed()

    def _on_params_changed(self):
        self.A = self._params.reshape(self.dim_out, self.dim_in)

    def _eval(self, t, y):
        return y @ self.A.T

    def _vjp(self, t, y, cot):
        gp = _batch_sum(cot[..., :, None] * y[..., None, :], 2).ravel()
        return cot @ self.A, gp

    def _jvp(self, t, y, tangent, tangent_params):
        out = tangent @ self.A.T
        if tangent_params is not None:
            out = out + y @ tangent_params.reshape(self.A.shape).T
        return out


class ScalarLinearField(VectorField):
    """f(t, y) = lam * y with the single parameter lam."""

    def __init__(self, lam: float, dim: int = 1):
        super().__init__(dim, dim, [lam])

    @property
    def lam(self):
        return self._params[0]

    def _eval(self, t, y):
        return self.lam * y

    def _vjp(self, t, y, cot):
        return self.lam * cot, np.array([np.sum(cot * y)])

    def _jvp(self, t, y, tangent, tangent_params):
        out = self.lam * tangent
        if tangent_params is not None:
            out = out + tangent_params[0] * y
        return out


class ConstantField(VectorField):
    """f(t, y) = c, independent of t and y; params = c."""

    def __init__(self, value, dim_in: int):
        value = np.asarray(value, dtype=float).ravel()
        super().__init__(dim_in, value.size, value)

    def _eval(self, t, y):
        return np.broadcast_to(self._params, y.shape[:-1] + (self.dim_out,)).copy()

    def _vjp(self, t, y, cot):
        return np.zeros(cot.shape[:-1] + (self.dim_in,)), _batch_sum(cot, 1)

    def _jvp(self, t, y, tangent, tangent_params):
        out = np.zeros(tangent.shape[:-1] + (self.dim_out,))
        if tangent_params is not None:
            out = out + tangent_params
        return out


class FunctionField(VectorField):
    """Field built from plain callables and their Jacobians.

    ``fn(t, y, p)`` returns ``(..., dim_out)``; ``jac_y(t, y, p)`` returns
    ``(..., dim_out, dim_in)``; ``jac_params`` (optional, required when there are
    parameters) returns ``(..., dim_out, m)``.
    """

    def __init__(
        self,
        fn: Callable,
        jac_y: Callable,
        dim_in: int,
        dim_out: int,
        params=(),
        jac_params: Callable | None = None,
        time_dependent: bool = True,
    ):
        super().__init__(dim_in, dim_out, params)
        if self._params.size and jac_params is None:
            raise ConfigurationError("jac_params is required for a parametrised FunctionField")
        self.fn, self.jac_y, self.jac_params = fn, jac_y, jac_params
        self.time_dependent = time_dependent

    def _eval(self, t, y):
        return np.asarray(self.fn(t, y, self._params), dtype=float)

    def _vjp(self, t, y, cot):
        gy = np.einsum("...o,...oi->...i", cot, self.jac_y(t, y, self._params))
        if self._params.size:
            gp = np.einsum("...o,...om->...m", cot, self.jac_params(t, y, self._params))
            gp = _batch_sum(gp, 1)
        else:
            gp = np.zeros(0)
        return gy, gp

    def _jvp(self, t, y, tangent, tangent_params):
        out = np.einsum("...oi,...i->...o", self.jac_y(t, y, self._params), tangent)
        if tangent_params is not None and self._params.size:
            out = out + np.einsum("...om,m->...o", self.jac_params(t, y, self._params), tangent_params)
        return out


# ---------------------------------------------------------------- MLP


def _tanh(a):
    v = np.tanh(a)
    return v, 1.0 - v * v


def _softplus(a):
    return np.logaddexp(0.0, a), expit(a)


def _silu(a):
    s = expit(a)
    return a * s, s * (1.0 + a * (1.0 - s))


ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "silu": _silu}


@dataclass(frozen=True)
class MLPParams:
    """Weights and biases of a fully connected network.

    ``weights`` concatenates each layer's matrix (row-major, shape out x in);
    ``biases`` concatenates the bias vectors.
    """

    layer_sizes: tuple
    weights: np.ndarray
    biases: np.ndarray
    activation: str

    def __post_init__(self):
        sizes = self.layer_sizes
        nw = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
        nb = sum(sizes[1:])
        if self.weights.size != nw or self.biases.size != nb:
            raise ContractError("weight/bias lengths do not match layer sizes")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}; valid: {sorted(ACTIVATIONS)}"
            )

    @property
    def params_dim(self) -> int:
        return self.weights.size + self.biases.size

    def flat(self) -> np.ndarray:
        """Flat theta: for each layer, W row-major then b."""
        out, wi, bi = [], 0, 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append(self.weights[wi:wi + n_in * n_out])
            out.append(self.biases[bi:bi + n_out])
            wi += n_in * n_out
            bi += n_out
        return np.concatenate(out)

    @classmethod
    def from_flat(cls, layer_sizes, theta, activation):
        theta = np.asarray(theta, dtype=float).ravel()
        ws, bs, i = [], [], 0
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            ws.append(theta[i:i + n_in * n_out])
            i += n_in * n_out
            bs.append(theta[i:i + n_out])
            i += n_out
        if i != theta.size:
            raise ContractError("flat parameter vector has the wrong length")
        return cls(tuple(layer_sizes), np.concatenate(ws), np.concatenate(bs), activation)


def mlp_init(layer_sizes: Sequence[int], activation: str = "tanh", seed: int = 0,
             scale: float = 1.0) -> MLPParams:
    """Uniform fan-in initialisation in [-scale/sqrt(fan_in), scale/sqrt(fan_in)]."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigurationError("layer_sizes needs at least two positive entries")
    if scale < 0:
        raise ConfigurationError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        u = scale / np.sqrt(n_in)
        ws.append(rng.uniform(-u, u, size=n_in * n_out))
        bs.append(rng.uniform(-u, u, size=n_out))
    return MLPParams(sizes, np.concatenate(ws), np.concatenate(bs), activation)


class MLP(VectorField):
    """Fully connected network with a smooth activation and a linear last layer.

    With ``time_dependent=True`` the network input is ``concat(t, y)``, so the
    first layer size is ``dim_in + 1``.
    """

    def __init__(self, params: MLPParams, time_dependent: bool = False):
        sizes = params.layer_sizes
        dim_in = sizes[0] - 1 if time_dependent else sizes[0]
        super().__init__(dim_in, sizes[-1], params.flat())
        self.layer_sizes = sizes
        self.activation = params.activation
        self.time_dependent = time_dependent
        self._act = ACTIVATIONS[params.activation]
        self._on_params_changed()

    def _on_params_changed(self):
        self.layers = []
        i = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self._params[i:i + n_in * n_out].reshape(n_out, n_in)
            i += n_in * n_out
            b = self._params[i:i + n_out]
            i += n_out
            self.layers.append((W, b))

    @property
    def mlp_params(self) -> MLPParams:
        return MLPParams.from_flat(self.layer_sizes, self._params, self.activation)

    def _input(self, t, y):
        if not self.time_dependent:
            return y
        tt = np.broadcast_to(np.asarray(t, dtype=float), y.shape[:-1] + (1,))
        return np.concatenate([tt, y], axis=-1)

    def _forward(self, t, y):
        z = self._input(t, y)
        zs, derivs = [z], []
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            a = z @ W.T + b
            if k == last:
                z = a
            else:
                z, d = self._act(a)
                derivs.append(d)
            zs.append(z)
        return zs, derivs

    def _eval(self, t, y):
        z = self._input(t, y)
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            z = z @ W.T + b
            if k != last:
                z = self._act(z)[0]
        return z

    def _backward(self, zs, derivs, cot):
        grads = []
        g = cot
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            zin = zs[k]
            g2 = g.reshape(-1, g.shape[-1])
            grads.append((g2.T @ zin.reshape(-1, zin.shape[-1])).ravel())
            grads.append(g2.sum(axis=0))
            g = g @ W
            if k > 0:
                g = g * derivs[k - 1]
        # grads were collected as (gW_L, gb_L, ..., gW_1, gb_1)
        pairs = [(grads[i], grads[i + 1]) for i in range(0, len(grads), 2)][::-1]
        gp = np.concatenate([x for pair in pairs for x in pair])
        if self.time_dependent:
            g = g[..., 1:]
        return g, gp

    def _vjp(self, t, y, cot):
        zs, derivs = self._forward(t, y)
        return self._backward(zs, derivs, cot)

    def value_and_vjp(self, t, y, cotangent, check: bool = True):
        if check:
            y = self._state(y)
            cotangent = np.asarray(cotangent, dtype=float)
        zs, derivs = self._forward(t, y)
        return zs[-1], VjpResult(*self._backward(zs, derivs, cotangent))

    def _jvp(self, t, y, tangent, tangent_params):
        z = self._input(t, y)
        if self.time_dependent:
            dz = np.concatenate([np.zeros(tangent.shape[:-1] + (1,)), tangent], axis=-1)
        else:
            dz = tangent
        if tangent_params is not None:
            tangent_layers = MLP(MLPParams.from_flat(self.layer_sizes, tangent_params, self.activation),
                                 self.time_dependent).layers
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            a = z @ W.T + b
            da = dz @ W.T
            if tangent_params is not None:
                dW, db = tangent_layers[k]
                da = da + z @ dW.T + db
            if k == last:
                z, dz = a, da
            else:
                z, d = self._act(a)
                dz = d * da
        return dz


def mlp(layer_sizes, activation="tanh", seed=0, scale=1.0, time_dependent=False) -> MLP:
    """Build an MLP field; ``layer_sizes[0]`` is the state dimension."""
    sizes = list(layer_sizes)
    if time_dependent:
        sizes[0] += 1
    return MLP(mlp_init(sizes, activation, seed, scale), time_dependent)


# ---------------------------------------------------------------- finite differences


def _rel(err, ref):
    if err == 0.0:
        return 0.0
    return err / max(ref, np.finfo(float).tiny)


def fd_check(field: VectorField, t, y, step: float = 1e-6) -> FdReport:
    """Compare vjp and jvp against central differences over every coordinate.

    Errors are reported relative to the largest finite-difference Jacobian entry.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    y = np.asarray(y, dtype=float).ravel()
    d, o, m = field.dim_in, field.dim_out, field.params.size

    J_fd = np.empty((o, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        J_fd[:, i] = (field(t, y + e) - field(t, y - e)) / (2 * step)
    J_vjp = np.stack([field.vjp(t, y, row).grad_y for row in np.eye(o)])
    J_jvp = np.stack([field.jvp(t, y, col) for col in np.eye(d)], axis=1)
    err_y = max(np.max(np.abs(J_vjp - J_fd)), np.max(np.abs(J_jvp - J_fd)))
    rel_y = _rel(err_y, np.max(np.abs(J_fd)))

    rel_p = 0.0
    if m:
        theta = field.params
        P_fd = np.empty((o, m))
        for k in range(m):
            e = np.zeros(m)
            e[k] = step
            P_fd[:, k] = (field.with_params(theta + e)(t, y) - field.with_params(theta - e)(t, y)) / (2 * step)
        P_vjp = np.stack([field.vjp(t, y, row).grad_params for row in np.eye(o)])
        P_jvp = np.stack([field.jvp(t, y, np.zeros(d), col) for col in np.eye(m)], axis=1)
        err_p = max(np.max(np.abs(P_vjp - P_fd)), np.max(np.abs(P_jvp - P_fd)))
        rel_p = _rel(err_p, np.max(np.abs(P_fd)))
    return FdReport(float(rel_y), float(rel_p))
