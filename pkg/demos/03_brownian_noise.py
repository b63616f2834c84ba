"""
Reproducible Brownian noise for SDE solves
==========================================

A Brownian Interval hands out exact increments W(s, t) for any query, in any
order, and returns the same numbers when asked again. That is what an adjoint
SDE solve needs: the backward pass must see the forward pass's noise.
"""

import numpy as np

from ndesolve.brownian import BrownianInterval
from ndesolve.experiments import brownian_benchmark
from ndesolve.problems import gbm_ito
from ndesolve.sde import sde_solve, strong_order_estimate

# Query, query something else, query again: same answer.
bi = BrownianInterval(0.0, 1.0, shape=(3,), seed=2024)
first = bi.increment(0.2, 0.7)
bi.increment(0.0, 0.45)
print("re-query identical:", np.array_equal(first, bi.increment(0.2, 0.7)))

# Many independent paths share one interval: each row of the state is a path.
p = gbm_ito()
paths = BrownianInterval(0.0, 1.0, shape=(5000, 1), seed=1)
y = sde_solve("milstein", p.sde, np.ones((5000, 1)), 0.0, 1.0, 2.0 ** -7, paths)
print(f"E[y(1)] ~ {y.mean():.4f}  (exact {p.mean(1.0):.4f})")

# Strong convergence orders, all step sizes driven by the same Brownian sample.
dts = [2.0 ** -k for k in range(3, 9)]
for method in ["euler_maruyama", "milstein"]:
    r = strong_order_estimate(method, p.sde, p.y0, dts, n_paths=2000, seed=3, exact=p.exact)
    print(f"{method:15s} strong order ~ {r.slope:.2f}")

# A backward sweep after a forward sweep is the adjoint access pattern. Prebuilding a
# dyadic tree sized to the step turns deep recursions into shallow ones.
for prebuild in (False, True):
    header, rows = brownian_benchmark("interval", 3000, "backward", prebuild=prebuild)
    print(f"prebuild={prebuild!s:5s} bridge samples in backward sweep: {rows[0][4]}")
