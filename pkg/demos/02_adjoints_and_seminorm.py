"""
Continuous adjoints, interpolation and the adjoint seminorm
===========================================================

Three ways of running the backward adjoint solve, compared on small problems
with known answers.
"""

import numpy as np

from ndesolve.adjoint import dto_backprop, otd_cde_backprop, otd_interpolated_backprop, otd_ode_backprop
from ndesolve.odecore import ControllerConfig, integrate
from ndesolve.problems import value_and_integral_cde
from ndesolve.vectorfield import LinearField

# --- 1. Re-integrating y backward can be unstable -----------------------------
# A linear field with a fast decaying mode: forward it is harmless, backward the
# same mode grows like e^{3t} and amplifies the forward solve's error in y.
c, s = np.cos(0.4), np.sin(0.4)
R = np.array([[c, -s], [s, c]])
field = LinearField(R @ np.diag([-3.0, -0.1]) @ R.T)
cfg = ControllerConfig(rtol=1e-3, atol=1e-5)
cot = np.array([1.0, -2.0])

sol = integrate(field, [1.0, 0.5], 0.0, 2.0, cfg=cfg, save_ts=np.linspace(0, 2, 201))
per_save = np.zeros_like(sol.ys)
per_save[-1] = cot
_, reference = dto_backprop(sol, field, per_save)

plain = otd_ode_backprop(field, sol.y_final, 2.0, 0.0, cot, cfg=cfg).grad_params
interp = otd_interpolated_backprop(field, sol, cot, cfg=cfg).grad_params
for name, g in [("re-integrated y", plain), ("interpolated y ", interp)]:
    print(f"{name}: relative error {np.linalg.norm(g - reference) / np.linalg.norm(reference):.2e}")

# --- 2. The parameter adjoint is an integral, not an ODE ----------------------
# Leaving it out of the step-size error norm never costs steps and often saves some.
print()
for scheme in ["hermite_cubic_bd", "natural_cubic"]:
    p = value_and_integral_cde(scheme=scheme)
    counts = {}
    for mode in ["rms_full", "adjoint_seminorm"]:
        r = otd_cde_backprop(p.field, p.path, p.exact(), [0.0, 1.0], norm_mode=mode)
        counts[mode] = (r.n_accepted, r.n_rejected)
    print(f"{scheme:17s} backward (accepted, rejected): full {counts['rms_full']}, "
          f"seminorm {counts['adjoint_seminorm']}")
