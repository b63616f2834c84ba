"""
From an irregular, partly missing time series to a CDE solve
============================================================

Write a small CSV with gaps, read it back, add time and observation-count
channels, interpolate, and drive a controlled differential equation with it.
"""

import tempfile
from pathlib import Path

import numpy as np

from ndesolve.odecore import ControllerConfig, integrate
from ndesolve.paths import (
    TimeSeries,
    augment_series,
    build_interpolation,
    cde_to_ode,
    logode_reduce,
    read_timeseries_csv,
    write_timeseries_csv,
)
from ndesolve.vectorfield import mlp

rng = np.random.default_rng(0)
ts = np.sort(rng.uniform(0, 10, 25))
xs = np.c_[np.sin(ts), np.cos(0.5 * ts)]
xs[rng.random(xs.shape) < 0.2] = np.nan  # drop about a fifth of the entries

with tempfile.TemporaryDirectory() as tmp:
    csv_path = Path(tmp) / "series.csv"
    write_timeseries_csv(TimeSeries(ts, xs, ["heart", "breath"]), csv_path)
    print(csv_path.read_text().splitlines()[:4])
    series = read_timeseries_csv(csv_path)

series = augment_series(series, include_time=True, include_counts=True)
print("channels:", series.labels)

# Hermite cubic with backward differences: the path on [t_j, t_{j+1}) uses no data
# from after t_{j+1}, so it can be built online as observations arrive.
path = build_interpolation(series, "hermite_cubic_bd")
print("measurability:", path.measurability, "| knots:", path.knots.size, "| jumps:", len(path.jumps))

d_y = 3
f = mlp([d_y, 16, d_y * path.dim], seed=1)  # f(y) is a d_y x d_x matrix
g = cde_to_ode(f, path)
jumps = [j for j in g.jumps if path.t_start < j < path.t_end]
sol = integrate(g, np.zeros(d_y), path.t_start, path.t_end, cfg=ControllerConfig(rtol=1e-6, atol=1e-8),
                jumps=jumps, record=False)
print("y(T) =", sol.y_final, f"({sol.n_accepted} steps)")

# The log-ODE method summarises each window by its depth-2 logsignature, so a long
# series becomes a short piecewise-linear drive.
lsp = logode_reduce(series, np.linspace(series.ts[0], series.ts[-1], 6), M=2)
print("log-ODE windows:", lsp.n_segments, "| features per window:", lsp.values.shape[1])
