"""Control paths from irregular, partially observed time series.

Each channel is interpolated separately over its observed entries (NaN marks a
missing entry), giving a piecewise cubic in the knot variable ``s``. Four
schemes are available: linear, rectilinear, Hermite cubic with backward
differences, and natural cubic.

Also here: the CDE-to-ODE reduction ``g(t, y) = f(y) dx/dt`` and the depth <= 2
logsignature machinery for the log-ODE reduction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, ContractError, UnsupportedDepthError
from .vectorfield import VectorField

__all__ = [
    "TimeSeries",
    "read_timeseries_csv",
    "write_timeseries_csv",
    "augment_series",
    "SCHEMES",
    "KNOT_RULES",
    "ControlPath",
    "build_interpolation",
    "CdeField",
    "cde_to_ode",
    "logsig2",
    "chen_compose",
    "mobius",
    "beta",
    "LogSigPath",
    "logode_reduce",
    "logode_field",
]

SCHEMES = {
    "linear": "discrete",
    "rectilinear": "continuous",
    "hermite_cubic_bd": "discrete",
    "natural_cubic": "none",
}
KNOT_RULES = ("s_eq_t", "s_eq_index", "rectilinear_rule")


# ---------------------------------------------------------------- time series


@dataclass
class TimeSeries:
    """Observations ``xs[j, k]`` at strictly increasing times ``ts[j]``; NaN = missing."""

    ts: np.ndarray
    xs: np.ndarray
    labels: list = dc_field(default_factory=list)
    time_channel: int | None = None

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float).ravel()
        xs = np.asarray(self.xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        self.xs = xs
        if xs.shape[0] != self.ts.size:
            raise ContractError("xs must have one row per timestamp")
        if self.ts.size == 0 or np.any(~np.isfinite(self.ts)):
            raise ContractError("timestamps must be finite and non-empty")
        if np.any(np.diff(self.ts) <= 0):
            raise ContractError("timestamps must be strictly increasing")
        if not np.any(np.isfinite(xs)):
            raise ContractError("series has no observed entries")
        if not self.labels:
            self.labels = [f"x{k}" for k in range(xs.shape[1])]
        if len(self.labels) != xs.shape[1]:
            raise ContractError("one label per channel required")

    @property
    def mask(self) -> np.ndarray:
        """True where observed."""
        return np.isfinite(self.xs)

    @property
    def n_channels(self) -> int:
        return self.xs.shape[1]


def _parse_cell(cell: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() == "nan":
        return np.nan
    return float(cell)


def read_timeseries_csv(path) -> TimeSeries:
    """Header row of names; first column is the timestamp; empty or NaN = missing."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ContractError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    ts, xs = [], []
    for r in rows[1:]:
        if len(r) != len(header):
            raise ContractError(f"{path}: row width {len(r)} differs from header width {len(header)}")
        ts.append(float(r[0]))
        xs.append([_parse_cell(c) for c in r[1:]])
    return TimeSeries(np.array(ts), np.array(xs).reshape(len(ts), len(header) - 1), header[1:])


def write_timeseries_csv(series: TimeSeries, path, time_label: str = "t"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([time_label] + list(series.labels))
        for t, row in zip(series.ts, series.xs):
            w.writerow([repr(float(t))] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def augment_series(series: TimeSeries, include_time: bool = False, include_counts: bool = False) -> TimeSeries:
    """Optionally prepend the time channel and append cumulative observation counts."""
    xs, labels, tc = series.xs, list(series.labels), series.time_channel
    data_channels = [k for k in range(xs.shape[1]) if k != tc]
    if include_counts:
        counts = np.cumsum(np.isfinite(xs[:, data_channels]), axis=0).astype(float)
        xs = np.concatenate([xs, counts], axis=1)
        labels += [f"count_{labels[k]}" for k in data_channels]
    if include_time:
        xs = np.concatenate([series.ts[:, None], xs], axis=1)
        labels = ["t"] + labels
        tc = 0
    return TimeSeries(series.ts.copy(), xs, labels, tc)


# ---------------------------------------------------------------- piecewise cubics


def _hermite_coeffs(x0, x1, m0, m1, h):
    delta = (x1 - x0) / h
    return np.array([x0, m0, (3 * delta - 2 * m0 - m1) / h, (m0 + m1 - 2 * delta) / h ** 2])


class ControlPath:
    """Piecewise cubic path, stored per channel as breakpoints and local coefficients.

    Coefficients of piece ``i`` act on ``s - breaks[i]`` in increasing degree.
    At a breakpoint, evaluation uses the piece to its right (the last
    breakpoint uses the piece to its left).
    """

    def __init__(self, breaks: list, coeffs: list, scheme: str, knots, t_start=None, t_end=None):
        if len(breaks) != len(coeffs):
            raise ContractError("one coefficient table per channel")
        self.breaks = [np.asarray(b, dtype=float) for b in breaks]
        self.coeffs = [np.asarray(c, dtype=float).reshape(-1, 4) for c in coeffs]
        self.scheme = scheme
        self.measurability = SCHEMES.get(scheme, "discrete")
        self.knots = np.asarray(knots, dtype=float)
        self.t_start = float(self.knots[0] if t_start is None else t_start)
        self.t_end = float(self.knots[-1] if t_end is None else t_end)
        self.jumps = self._derivative_breaks()

    @property
    def dim(self) -> int:
        return len(self.breaks)

    def _check(self, t):
        slack = 1e-12 * max(1.0, abs(self.t_start), abs(self.t_end))
        if t < self.t_start - slack or t > self.t_end + slack:
            raise ContractError(f"time {t} outside [{self.t_start}, {self.t_end}]")

    def _piece(self, k, t):
        b = self.breaks[k]
        i = int(np.searchsorted(b, t, side="right")) - 1
        i = min(max(i, 0), len(b) - 2)
        return i, t - b[i]

    def evaluate(self, t) -> np.ndarray:
        self._check(t)
        out = np.empty(self.dim)
        for k in range(self.dim):
            i, x = self._piece(k, t)
            c = self.coeffs[k][i]
            out[k] = c[0] + x * (c[1] + x * (c[2] + x * c[3]))
        return out

    def derivative(self, t, order: int = 1) -> np.ndarray:
        self._check(t)
        out = np.empty(self.dim)
        for k in range(self.dim):
            i, x = self._piece(k, t)
            c = self.coeffs[k][i]
            if order == 1:
                out[k] = c[1] + x * (2 * c[2] + 3 * x * c[3])
            elif order == 2:
                out[k] = 2 * c[2] + 6 * x * c[3]
            else:
                raise ContractError("derivative order must be 1 or 2")
        return out

    def left_derivative(self, t, order: int = 1) -> np.ndarray:
        """Derivative using the piece to the left of ``t``."""
        out = np.empty(self.dim)
        for k in range(self.dim):
            b = self.breaks[k]
            i = int(np.searchsorted(b, t, side="left")) - 1
            i = min(max(i, 0), len(b) - 2)
            x = t - b[i]
            c = self.coeffs[k][i]
            out[k] = c[1] + x * (2 * c[2] + 3 * x * c[3]) if order == 1 else 2 * c[2] + 6 * x * c[3]
        return out

    def integral(self, a: float, b: float) -> np.ndarray:
        """Exact integral of each channel over [a, b]."""
        self._check(a)
        self._check(b)
        out = np.zeros(self.dim)
        for k in range(self.dim):
            br, co = self.breaks[k], self.coeffs[k]
            for i in range(len(br) - 1):
                lo, hi = max(a, br[i]), min(b, br[i + 1])
                if hi <= lo:
                    continue
                x0, x1 = lo - br[i], hi - br[i]
                powers = np.arange(1, 5)
                out[k] += np.sum(co[i] * (x1 ** powers - x0 ** powers) / powers)
        return out

    def _derivative_breaks(self):
        # Breakpoints where dx/dt or d2x/dt2 is discontinuous. An adaptive solver's
        # error estimate cannot see these, so they are stepped to exactly.
        pts = sorted({float(p) for b in self.breaks for p in b[1:-1]})
        jumps = []
        for p in pts:
            for order in (1, 2):
                right, left = self.derivative(p, order), self.left_derivative(p, order)
                if np.max(np.abs(right - left)) > 1e-9 * max(1.0, np.max(np.abs(right))):
                    jumps.append(p)
                    break
        return jumps

    __call__ = evaluate


def _knots(series: TimeSeries, rule: str):
    n = series.ts.size
    j = np.arange(n, dtype=float)
    if rule == "s_eq_t":
        return series.ts.copy()
    if rule == "s_eq_index":
        return j
    if rule == "rectilinear_rule":
        return series.ts + j
    raise ConfigurationError(f"unknown knot rule {rule!r}; valid: {list(KNOT_RULES)}")


def _extend(breaks, coeffs, lo, hi):
    """Constant extension before the first and after the last observed knot."""
    breaks, coeffs = list(breaks), list(coeffs)
    if breaks[0] > lo:
        first = coeffs[0][0]
        breaks.insert(0, lo)
        coeffs.insert(0, np.array([first, 0, 0, 0]))
    if breaks[-1] < hi:
        c, h = coeffs[-1], breaks[-1] - breaks[-2]
        last = c[0] + h * (c[1] + h * (c[2] + h * c[3]))
        breaks.append(hi)
        coeffs.append(np.array([last, 0, 0, 0]))
    return np.array(breaks), np.array(coeffs)


def _channel_pieces(scheme, s, x):
    """Interpolate one channel over its observed knots ``s`` with values ``x``."""
    if s.size == 1:
        return np.array([s[0], s[0]]), np.array([[x[0], 0, 0, 0]])
    h = np.diff(s)
    if scheme == "linear":
        coeffs = [np.array([x[i], (x[i + 1] - x[i]) / h[i], 0, 0]) for i in range(h.size)]
    elif scheme == "hermite_cubic_bd":
        slopes = np.diff(x) / h
        coeffs = []
        for i in range(h.size):
            m0 = slopes[i - 1] if i > 0 else 0.0
            coeffs.append(_hermite_coeffs(x[i], x[i + 1], m0, slopes[i], h[i]))
    elif scheme == "natural_cubic":
        cs = CubicSpline(s, x, bc_type="natural")
        coeffs = [cs.c[::-1, i] for i in range(h.size)]
    else:
        raise ConfigurationError(f"unknown scheme {scheme!r}; valid: {sorted(SCHEMES)}")
    return s, np.array(coeffs)


def build_interpolation(series: TimeSeries, scheme: str = "hermite_cubic_bd",
                        knot_rule: str | None = None) -> ControlPath:
    """Interpolate every channel of ``series`` so that ``x(s_j)`` matches the data."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}; valid: {sorted(SCHEMES)}")
    if knot_rule is None:
        knot_rule = "rectilinear_rule" if scheme == "rectilinear" else "s_eq_t"
    s = _knots(series, knot_rule)
    if scheme == "hermite_cubic_bd" and s.size < 2:
        raise ContractError("Hermite interpolation needs at least two observations")
    if scheme == "rectilinear":
        return _rectilinear(series, s, knot_rule)
    lo, hi = s[0], s[-1]
    breaks, coeffs = [], []
    for k in range(series.n_channels):
        obs = np.isfinite(series.xs[:, k])
        if not np.any(obs):
            b, c = np.array([lo, hi]), np.zeros((1, 4))
        else:
            b, c = _channel_pieces(scheme, s[obs], series.xs[obs, k])
            if b[0] != b[-1]:
                b, c = _extend(b, c, lo, hi)
            else:
                b = np.array([lo, hi])
        breaks.append(b)
        coeffs.append(c)
    return ControlPath(breaks, coeffs, scheme, s)


def _fill_forward(col):
    out = np.empty_like(col)
    last = 0.0
    for j, v in enumerate(col):
        if np.isfinite(v):
            last = v
        out[j] = last
    return out


def _rectilinear(series: TimeSeries, s, knot_rule):
    n = s.size
    if n == 1:
        r = np.array([])
    elif knot_rule == "rectilinear_rule":
        r = series.ts[1:] + np.arange(1, n) - 1.0
    else:
        r = 0.5 * (s[:-1] + s[1:])
    # knot sequence s_0, r_1, s_1, ..., r_n, s_n
    seq = np.empty(2 * n - 1)
    seq[0::2] = s
    seq[1::2] = r
    breaks, coeffs = [], []
    for k in range(series.n_channels):
        if k == series.time_channel:
            col = series.ts
            vals_s, vals_r = col, col[1:]  # time moves first, then holds
        else:
            col = _fill_forward(series.xs[:, k])
            vals_s, vals_r = col, col[:-1]  # value holds, then jumps to the new observation
        vals = np.empty(2 * n - 1)
        vals[0::2] = vals_s
        vals[1::2] = vals_r
        if n == 1:
            b, c = np.array([s[0], s[0]]), np.array([[vals[0], 0, 0, 0]])
        else:
            h = np.diff(seq)
            b = seq
            c = np.array([[vals[i], (vals[i + 1] - vals[i]) / h[i], 0, 0] for i in range(h.size)])
        breaks.append(b)
        coeffs.append(c)
    return ControlPath(breaks, coeffs, "rectilinear", s)


# ---------------------------------------------------------------- CDE reduction


class CdeField(VectorField):
    """g(t, y) = f(y) dx/dt(t), with ``f`` returning a flat ``d_y * d_x`` matrix."""

    def __init__(self, f: VectorField, path: ControlPath):
        d_y, d_x = f.dim_in, path.dim
        if f.dim_out != d_y * d_x:
            raise ContractError(f"field output {f.dim_out} must equal d_y*d_x = {d_y * d_x}")
        super().__init__(d_y, d_y, f.params)
        self.f, self.path, self.d_x = f, path, d_x
        self.time_dependent = True
        self.jumps = list(path.jumps)

    def _on_params_changed(self):
        self.f = self.f.with_params(self._params)

    def _mat(self, t, y):
        return self.f(t, y, check=False).reshape(y.shape[:-1] + (self.dim_out, self.d_x))

    def _eval(self, t, y):
        return self._mat(t, y) @ self.path.derivative(t)

    def _vjp(self, t, y, cot):
        dx = self.path.derivative(t)
        return self.f.vjp(t, y, (cot[..., :, None] * dx).reshape(cot.shape[:-1] + (-1,)), check=False)

    def _jvp(self, t, y, tangent, tangent_params):
        J = self.f.jvp(t, y, tangent, tangent_params, check=False)
        return J.reshape(J.shape[:-1] + (self.dim_out, self.d_x)) @ self.path.derivative(t)


def cde_to_ode(f: VectorField, path: ControlPath) -> CdeField:
    return CdeField(f, path)


# ---------------------------------------------------------------- logsignatures


def _pairs(d):
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def chen_compose(ls1, ls2, d: int) -> np.ndarray:
    """Depth-2 logsignature of a concatenation from those of its pieces."""
    ls1, ls2 = np.asarray(ls1, float), np.asarray(ls2, float)
    a, b = ls1[:d], ls2[:d]
    areas = ls1[d:] + ls2[d:] + 0.5 * np.array([a[i] * b[j] - a[j] * b[i] for i, j in _pairs(d)])
    return np.concatenate([a + b, areas])


def logsig2(points) -> np.ndarray:
    """Increment and Levy areas A_ij = 1/2 int (x_i dx_j - x_j dx_i), i < j, of a polyline."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise ContractError("points must be an (n, d) array with d >= 1")
    if pts.shape[0] < 2:
        raise ContractError("need at least two points")
    d = pts.shape[1]
    out = np.zeros(beta(d, 2))
    for inc in np.diff(pts, axis=0):
        out = chen_compose(out, np.concatenate([inc, np.zeros(out.size - d)]), d)
    return out


def mobius(n: int) -> int:
    result, p, m = 1, 2, n
    while p * p <= m:
        if m % p == 0:
            m //= p
            if m % p == 0:
                return 0
            result = -result
        p += 1
    return -result if m > 1 else result


def beta(d: int, M: int) -> int:
    """Dimension of the depth-M logsignature of a d-dimensional path (M <= 2)."""
    if d < 1:
        raise ContractError("d must be at least 1")
    if M < 1:
        raise ContractError("depth must be at least 1")
    if M > 2:
        raise UnsupportedDepthError("logsignature depth above 2 is not supported")
    total = 0
    for k in range(1, M + 1):
        total += sum(mobius(k // j) * d ** j for j in range(1, k + 1) if k % j == 0) // k
    return total


@dataclass
class LogSigPath:
    """Per-window logsignatures divided by window length."""

    windows: np.ndarray
    values: np.ndarray
    depth: int
    dim: int

    @property
    def n_segments(self) -> int:
        return self.values.shape[0]

    def as_control_path(self) -> ControlPath:
        """Piecewise-linear path in logsignature space whose slope on window j is ``values[j]``."""
        w = self.windows
        h = np.diff(w)
        cum = np.vstack([np.zeros(self.values.shape[1]), np.cumsum(self.values * h[:, None], axis=0)])
        breaks, coeffs = [], []
        for k in range(self.values.shape[1]):
            breaks.append(w)
            coeffs.append(np.array([[cum[i, k], self.values[i, k], 0, 0] for i in range(h.size)]))
        return ControlPath(breaks, coeffs, "linear", w)


def logode_reduce(series: TimeSeries, window_bounds: Sequence[float], M: int = 2) -> LogSigPath:
    """Logsignatures of the linearly interpolated data over each window ``[r_j, r_{j+1}]``."""
    r = np.asarray(window_bounds, dtype=float)
    b = beta(series.n_channels, M)
    if r.size < 2:
        raise ContractError("need at least one window")
    if np.any(np.diff(r) <= 0):
        raise ContractError("window bounds must be strictly increasing (no empty windows)")
    if not (np.isclose(r[0], series.ts[0]) and np.isclose(r[-1], series.ts[-1])):
        raise ContractError("windows must start at t_0 and end at t_n")
    path = build_interpolation(series, "linear", "s_eq_t")
    all_breaks = np.unique(np.concatenate(path.breaks))
    vals = []
    for lo, hi in zip(r[:-1], r[1:]):
        inner = all_breaks[(all_breaks > lo) & (all_breaks < hi)]
        pts = np.stack([path.evaluate(t) for t in np.concatenate([[lo], inner, [hi]])])
        vals.append(logsig2(pts)[:b] / (hi - lo))
    return LogSigPath(r, np.array(vals), M, series.n_channels)


def logode_field(fhat: VectorField, lsp: LogSigPath) -> CdeField:
    """Reduced ODE field ``fhat(y) logsig_j / (r_{j+1} - r_j)``; ``fhat`` outputs ``d_y * beta``."""
    return cde_to_ode(fhat, lsp.as_control_path())
