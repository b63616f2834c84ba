"""Desk-scale experiments behind the command-line interface.

Each function returns ``(header, rows)`` ready for CSV output.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .adjoint import (
    checkpoints_from_solution,
    dto_backprop,
    forward_sensitivity,
    otd_checkpointed_backprop,
    otd_interpolated_backprop,
    otd_ode_backprop,
)
from .brownian import SOURCES, BrownianInterval, make_source
from .density import TraceMode, cnf_logprob
from .errors import ConfigurationError
from .odecore import TABLEAUX, ControllerConfig, integrate, rk_step
from .problems import OdeProblem, SdeProblem, get_problem
from .reversible import REVERSIBLE_SOLVERS, reversible_backprop, reversible_integrate
from .sde import ITO_STEPPERS, SDE_STEPPERS, strong_order_estimate
from .vectorfield import ConstantField, FunctionField, LinearField, mlp

__all__ = [
    "ODE_SOLVERS",
    "fit_slope",
    "convergence",
    "stability",
    "GRAD_REGIMES",
    "gradcheck",
    "PATTERNS",
    "brownian_benchmark",
    "CNF_FIELDS",
    "cnf2d",
]

ODE_SOLVERS = sorted(set(TABLEAUX) | set(REVERSIBLE_SOLVERS))


def _check_name(kind, name, valid):
    if name not in valid:
        raise ConfigurationError(f"unknown {kind} {name!r}; valid: {sorted(valid)}")


def fit_slope(dts, errors) -> float:
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


def _ode_solve_fixed(solver, field, y0, t0, t1, dt):
    if solver in REVERSIBLE_SOLVERS:
        return reversible_integrate(solver, field, y0, t0, t1, dt=dt).y_final
    return integrate(field, y0, t0, t1, TABLEAUX[solver], fixed_dt=dt, record=False).y_final


# ---------------------------------------------------------------- convergence


def convergence(solver: str, problem: str = "linear_decay", dts=None, n_paths: int = 2000, seed: int = 0):
    """Error at the final time for each step size, then a fitted log-log slope row."""
    prob = get_problem(problem)
    if dts is None:
        dts = [2.0 ** -k for k in range(3, 9)]
    dts = np.asarray(dts, dtype=float)
    if isinstance(prob, OdeProblem):
        _check_name("ODE solver", solver, ODE_SOLVERS)
        exact = prob.exact(prob.t1)
        errors = np.array([
            np.max(np.abs(_ode_solve_fixed(solver, prob.field, prob.y0, prob.t0, prob.t1, dt) - exact))
            for dt in dts
        ])
    elif isinstance(prob, SdeProblem):
        _check_name("SDE solver", solver, SDE_STEPPERS)
        if (solver in ITO_STEPPERS) != (prob.interpretation == "ito"):
            raise ConfigurationError(
                f"solver {solver!r} does not converge to the {prob.interpretation} solution of {problem!r}"
            )
        res = strong_order_estimate(solver, prob.sde, prob.y0, dts, n_paths, seed,
                                    exact=prob.exact, reference_dt=prob.reference_dt, t0=prob.t0, t1=prob.t1)
        errors = res.errors
    else:
        raise ConfigurationError(f"problem {problem!r} has no closed form for convergence studies")
    rows = [(float(dt), float(e), "") for dt, e in zip(dts, errors)]
    rows.append(("", "", fit_slope(dts, errors)))
    return ["dt", "max_abs_error", "slope"], rows


# ---------------------------------------------------------------- stability


def _rotation_blocks(zs):
    """Batched real 2x2 blocks representing multiplication by each complex z."""
    zs = np.asarray(zs, dtype=complex)
    M = np.empty((zs.size, 2, 2))
    M[:, 0, 0] = M[:, 1, 1] = zs.real
    M[:, 0, 1] = -zs.imag
    M[:, 1, 0] = zs.imag
    fn = lambda t, y, p: np.einsum("kij,kj->ki", M, y)  # noqa: E731
    jac = lambda t, y, p: M  # noqa: E731
    return FunctionField(fn, jac, 2, 2, time_dependent=False)


def default_stability_grid(n: int = 21):
    re = np.linspace(-2.5, 0.5, n)
    im = np.linspace(-1.5, 1.5, n)
    return (re[None, :] + 1j * im[:, None]).ravel()


def stability(solver: str, points=None, n_steps: int = 10_000, bound: float = 10.0):
    """``bounded = 1`` iff sup |y_n| <= bound * |y_0| over ``n_steps`` steps of y' = z y with dt = 1."""
    _check_name("ODE solver", solver, ODE_SOLVERS)
    zs = default_stability_grid() if points is None else np.asarray(points, dtype=complex).ravel()
    field = _rotation_blocks(zs)
    y = np.tile([1.0, 0.0], (zs.size, 1))
    peak = np.ones(zs.size)
    with np.errstate(over="ignore", invalid="ignore"):
        if solver in REVERSIBLE_SOLVERS:
            solver_cls = REVERSIBLE_SOLVERS[solver]
            state = solver_cls.init(field, 0.0, y)
            for n in range(n_steps):
                state, _ = solver_cls.step(field, state, 1.0)
                norm = np.linalg.norm(state.y, axis=1)
                peak = np.maximum(peak, np.where(np.isfinite(norm), norm, np.inf))
                if np.all(peak > bound):
                    break
        else:
            tab = TABLEAUX[solver]
            for n in range(n_steps):
                y = rk_step(tab, field, float(n), y, 1.0).y_next
                norm = np.linalg.norm(y, axis=1)
                peak = np.maximum(peak, np.where(np.isfinite(norm), norm, np.inf))
                if np.all(peak > bound):
                    break
    bounded = (peak <= bound).astype(int)
    rows = [(float(z.real), float(z.imag), int(b)) for z, b in zip(zs, bounded)]
    return ["re", "im", "bounded"], rows


# ---------------------------------------------------------------- gradients


GRAD_REGIMES = ("dto", "otd", "otd_seminorm", "interpolated", "checkpointed",
                "reversible_heun", "alf", "forward_sensitivity")


def _grad_problem(problem: str, seed: int):
    if problem == "mlp":
        field = mlp([2, 16, 2], activation="tanh", seed=seed, scale=1.0)
        rng = np.random.default_rng(seed)
        return field, rng.standard_normal(2), 0.0, 1.0, rng.standard_normal(2)
    prob = get_problem(problem)
    if not isinstance(prob, OdeProblem):
        raise ConfigurationError(f"gradcheck needs an ODE problem or 'mlp', got {problem!r}")
    return prob.field, prob.y0, prob.t0, prob.t1, np.ones_like(prob.y0)


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def gradcheck(problem: str = "mlp", regimes=GRAD_REGIMES, rtol: float = 1e-6, atol: float = 1e-8,
              seed: int = 0, dt: float = 0.02, fd_step: float = 1e-6):
    """Compare parameter gradients of ``L = <c, y(T)>`` across backpropagation regimes.

    Adaptive regimes use Dopri5 at (rtol, atol); reversible regimes use fixed ``dt``
    and are compared against discretise-then-optimise on their own discretisation.
    """
    for r in regimes:
        _check_name("regime", r, GRAD_REGIMES)
    field, y0, t0, t1, c = _grad_problem(problem, seed)
    cfg = ControllerConfig(rtol=rtol, atol=atol)
    theta = field.params

    def loss(th):
        return float(c @ integrate(field.with_params(th), y0, t0, t1, cfg=cfg, record=False).y_final)

    fd = np.array([(loss(theta + fd_step * e) - loss(theta - fd_step * e)) / (2 * fd_step)
                   for e in np.eye(theta.size)])
    sol = integrate(field, y0, t0, t1, cfg=cfg)
    _, g_dto = dto_backprop(sol, field, c)
    n_fwd = sol.n_accepted + sol.n_rejected
    stages = sol.method.stages
    rows = []
    for regime in regimes:
        vs_dto, fwd, bwd, peak = "", n_fwd, "", 1
        if regime == "dto":
            g = g_dto
            bwd, peak = len(sol.step_records), len(sol.step_records) * stages
        elif regime in ("otd", "otd_seminorm"):
            mode = "adjoint_seminorm" if regime == "otd_seminorm" else "rms_full"
            res = otd_ode_backprop(field, sol.y_final, t1, t0, c, cfg=cfg, norm_mode=mode)
            g, bwd = res.grad_params, res.n_accepted + res.n_rejected
        elif regime == "interpolated":
            dense = integrate(field, y0, t0, t1, cfg=cfg, save_ts=np.linspace(t0, t1, 33), record=False)
            res = otd_interpolated_backprop(field, dense, c, cfg=cfg)
            g, bwd, peak = res.grad_params, res.n_accepted + res.n_rejected, dense.ts.size
        elif regime == "checkpointed":
            cps = checkpoints_from_solution(sol)
            res = otd_checkpointed_backprop(field, cps, c, cfg=cfg)
            g, bwd, peak = res.grad_params, res.n_accepted + res.n_rejected, len(cps)
        elif regime in REVERSIBLE_SOLVERS:
            rsol = reversible_integrate(regime, field, y0, t0, t1, dt=dt, store_states=True)
            _, g = reversible_backprop(regime, field, rsol.terminal_state, rsol.dt_schedule, c)
            _, g_ref = dto_backprop(rsol, field, c)
            vs_dto = _rel(g, g_ref)
            fwd = bwd = rsol.n_accepted
            # FD of the same fixed-step discretisation
            def rloss(th, regime=regime):
                return float(c @ reversible_integrate(regime, field.with_params(th), y0, t0, t1, dt=dt).y_final)
            fd_r = np.array([(rloss(theta + fd_step * e) - rloss(theta - fd_step * e)) / (2 * fd_step)
                             for e in np.eye(theta.size)])
            rows.append((regime, _rel(g, fd_r), vs_dto, fwd, bwd, 1))
            continue
        else:  # forward_sensitivity
            _, Jt = forward_sensitivity(field, y0, t0, t1, cfg=cfg)
            g, bwd, peak = c @ Jt, 0, 1
        if vs_dto == "":
            vs_dto = _rel(g, g_dto)
        rows.append((regime, _rel(g, fd), vs_dto, fwd, bwd, peak))
    header = ["regime", "rel_err_vs_fd", "rel_err_vs_dto", "steps_fwd", "steps_bwd", "peak_records"]
    return header, rows


# ---------------------------------------------------------------- Brownian


PATTERNS = ("forward", "backward", "random")


def _ops(src):
    if isinstance(src, BrownianInterval):
        return src.stats["bridge_samples"], src.stats["cache_hits"]
    if hasattr(src, "n_samples"):
        return src.n_samples, ""
    return src.n_levels, ""


def brownian_benchmark(source: str = "interval", n_queries: int = 1000, pattern: str = "backward",
                       seed: int = 0, prebuild: bool = False, split: str = "query", cache_size: int = 128):
    """Query ``n`` unit-grid increments in the given order and report work and statistics.

    ``backward`` is a forward sweep followed by the measured backward sweep, the
    access pattern of an adjoint SDE solve.
    """
    _check_name("Brownian source", source, SOURCES)
    _check_name("pattern", pattern, PATTERNS)
    kwargs = {"t0": 0.0, "t1": 1.0, "seed": seed}
    if source == "interval":
        kwargs.update(cache_size=cache_size, split=split)
    src = make_source(source, **kwargs)
    if prebuild and isinstance(src, BrownianInterval):
        src.prebuild_dyadic(1.0 / n_queries)
    grid = np.arange(n_queries + 1) / n_queries
    idx = np.arange(n_queries)
    if pattern == "backward":
        for k in idx:
            src.increment(grid[k], grid[k + 1])
        base_ops, base_hits = _ops(src)
        idx = idx[::-1]
    else:
        base_ops, base_hits = 0, 0
        if pattern == "random":
            idx = np.random.default_rng(seed).permutation(n_queries)
    z = np.empty(n_queries)
    for k in idx:
        z[k] = float(src.increment(grid[k], grid[k + 1])) * np.sqrt(n_queries)
    ops, hits = _ops(src)
    ops -= base_ops
    if hits != "":
        hits -= base_hits
    p_mean = float(2 * stats.norm.sf(abs(z.mean()) * np.sqrt(n_queries)))
    chi = float(np.sum(z * z))
    p_var = float(2 * min(stats.chi2.cdf(chi, n_queries), stats.chi2.sf(chi, n_queries)))
    header = ["source", "pattern", "prebuild", "n_queries", "wall_ops", "cache_hits", "mean_pvalue", "var_pvalue"]
    return header, [(source, pattern, int(prebuild), n_queries, ops, hits, p_mean, p_var)]


# ---------------------------------------------------------------- CNF


def _cnf_field(name: str, seed: int):
    if name == "zero":
        return ConstantField(np.zeros(2), 2)
    if name == "contraction":
        return LinearField(-0.5 * np.eye(2))
    if name == "rotation":
        return LinearField(np.array([[-0.2, 1.0], [-1.0, -0.2]]))
    return mlp([2, 16, 2], activation="tanh", seed=seed, scale=1.0)


CNF_FIELDS = ("zero", "contraction", "rotation", "mlp")


def cnf2d(field: str = "contraction", grid_size: int = 41, extent: float = 4.0, steps: int = 0,
          trace: str = "exact", rtol: float = 1e-6, atol: float = 1e-8, seed: int = 0,
          hutchinson_repeats: int = 64):
    """log p at time 1 on a square grid for a flow of a standard normal.

    ``steps > 0`` uses that many fixed Dopri5 steps; otherwise adaptive. With
    ``trace='hutchinson'`` the grid is solved ``hutchinson_repeats`` times with
    independent single-sample Gaussian noise per point and the mean and standard error are
    reported next to the exact value.
    """
    _check_name("CNF field", field, CNF_FIELDS)
    _check_name("trace mode", trace, ("exact", "hutchinson"))
    f = _cnf_field(field, seed)
    g = np.linspace(-extent, extent, grid_size)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    cfg = ControllerConfig(rtol=rtol, atol=atol)
    fixed = 1.0 / steps if steps > 0 else None
    exact = cnf_logprob(f, pts, cfg=cfg, fixed_dt=fixed)
    if trace == "exact":
        return ["x", "y", "logp"], [(float(a), float(b), float(v)) for (a, b), v in zip(pts, exact)]
    runs = np.stack([
        cnf_logprob(f, pts, cfg=cfg, fixed_dt=fixed,
                    mode=TraceMode("hutchinson", "gaussian", 1, seed * 1_000_003 + r, per_batch=True))
        for r in range(hutchinson_repeats)
    ])
    mean = runs.mean(axis=0)
    se = runs.std(axis=0, ddof=1) / np.sqrt(hutchinson_repeats)
    rows = [(float(a), float(b), float(m), float(e), float(s))
            for (a, b), m, e, s in zip(pts, mean, exact, se)]
    return ["x", "y", "logp", "logp_exact", "logp_se"], rows
