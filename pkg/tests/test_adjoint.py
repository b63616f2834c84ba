import numpy as np
import pytest

from ndesolve.adjoint import (
    AdjointOptions,
    AdjointState,
    adjoint_seminorm,
    checkpoints_from_solution,
    dto_backprop,
    forward_sensitivity,
    otd_cde_backprop,
    otd_checkpointed_backprop,
    otd_interpolated_backprop,
    otd_ode_backprop,
    otd_sde_backprop,
    seminorm_mask,
)
from ndesolve.brownian import BrownianInterval
from ndesolve.errors import BlowUpError, ConfigurationError, ContractError, UnsupportedNoiseError
from ndesolve.odecore import EULER, HEUN, ControllerConfig, integrate
from ndesolve.paths import TimeSeries, build_interpolation, cde_to_ode
from ndesolve.problems import value_and_integral_cde
from ndesolve.reversible import reversible_backprop, reversible_integrate
from ndesolve.sde import SdeField, sde_solve
from ndesolve.vectorfield import ConstantField, FunctionField, LinearField, ScalarLinearField, mlp

TIGHT = ControllerConfig(rtol=1e-9, atol=1e-11)


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b)


def rotated_stiff():
    """2-D linear field with a fast mode (rate -3) that grows when solved backward."""
    c, s = np.cos(0.4), np.sin(0.4)
    R = np.array([[c, -s], [s, c]])
    return LinearField(R @ np.diag([-3.0, -0.1]) @ R.T)


def loss_grads_fd(field, y0, c, t1, cfg, h=1e-6):
    def L(f, y):
        return c @ integrate(f, y, 0.0, t1, cfg=cfg, record=False).y_final

    gy = np.array([(L(field, y0 + h * e) - L(field, y0 - h * e)) / (2 * h) for e in np.eye(y0.size)])
    th = field.params
    gp = np.array([(L(field.with_params(th + h * e), y0) - L(field.with_params(th - h * e), y0)) / (2 * h)
                   for e in np.eye(th.size)])
    return gy, gp


# ---------------------------------------------------------------- options and state


def test_options_validation():
    AdjointOptions(mode="otd_checkpointed", checkpoints=3)
    for kw in [{"mode": "magic"}, {"norm_mode": "l1"}, {"checkpoints": 0}, {"interp_knots": 1}]:
        with pytest.raises(ConfigurationError):
            AdjointOptions(**kw)


def test_terminal_state_has_zero_parameter_adjoint():
    st = AdjointState.terminal(1.0, [1.0, 2.0], [3.0, 4.0], 5)
    assert np.array_equal(st.a_theta, np.zeros(5))
    assert st.stacked().shape == (9,)


# ---------------------------------------------------------------- seminorm


def test_seminorm_hand_value():
    assert adjoint_seminorm([3.0, 4.0, 123.0, -7.0], (1, 2)) == pytest.approx(np.sqrt(12.5), abs=1e-12)
    assert adjoint_seminorm([3.0, 4.0, 0.0, 0.0], (1, 2)) == pytest.approx(np.sqrt(12.5), abs=1e-12)


def test_seminorm_ignores_parameter_block(rng):
    s = rng.standard_normal(2 + 2 + 6)
    t = s.copy()
    t[4:] = rng.standard_normal(6) * 1e6
    assert adjoint_seminorm(s, (2, 6)) == adjoint_seminorm(t, (2, 6))
    assert adjoint_seminorm(s, (2, 6), exclude_y=True) == pytest.approx(np.sqrt(np.mean(s[2:4] ** 2)))


def test_seminorm_mask_layout():
    assert seminorm_mask(2, 3).all()
    assert list(seminorm_mask(2, 3, "adjoint_seminorm")) == [1, 1, 1, 1, 0, 0, 0]
    assert list(seminorm_mask(2, 3, "adjoint_seminorm", True)) == [0, 0, 1, 1, 0, 0, 0]
    with pytest.raises(ContractError):
        adjoint_seminorm(np.zeros(5), (2, 3))


# ---------------------------------------------------------------- discretise-then-optimise


def test_dto_single_euler_step():
    lam, dt, y0 = -0.7, 0.1, 2.0
    f = ScalarLinearField(lam, 1)
    sol = integrate(f, [y0], 0.0, dt, EULER, fixed_dt=dt)
    gy, gp = dto_backprop(sol, f, [1.5])
    assert gy == pytest.approx([(1 + lam * dt) * 1.5], abs=1e-15)
    assert gp == pytest.approx([y0 * dt * 1.5], abs=1e-15)


def test_dto_zero_cotangent(mlp_field):
    sol = integrate(mlp_field, [0.1, 0.2], 0, 1, fixed_dt=0.1)
    gy, gp = dto_backprop(sol, mlp_field, np.zeros(2))
    assert not gy.any() and not gp.any()


def test_dto_requires_records(mlp_field):
    sol = integrate(mlp_field, [0.1, 0.2], 0, 1, record=False)
    with pytest.raises(ContractError):
        dto_backprop(sol, mlp_field, np.ones(2))


def test_dto_matches_finite_differences_fixed_dopri5(mlp_field):
    y0, c = np.array([0.3, -0.5]), np.array([1.0, -0.4])
    sol = integrate(mlp_field, y0, 0, 1, fixed_dt=1 / 30)
    assert sol.n_accepted == 30
    gy, gp = dto_backprop(sol, mlp_field, c)

    def L(f, y):
        return c @ integrate(f, y, 0, 1, fixed_dt=1 / 30, record=False).y_final

    h = 1e-6
    fy = np.array([(L(mlp_field, y0 + h * e) - L(mlp_field, y0 - h * e)) / (2 * h) for e in np.eye(2)])
    th = mlp_field.params
    fp = np.array([(L(mlp_field.with_params(th + h * e), y0) - L(mlp_field.with_params(th - h * e), y0)) / (2 * h)
                   for e in np.eye(th.size)])
    assert rel(gy, fy) < 1e-5 and rel(gp, fp) < 1e-5


def test_dto_cotangents_at_save_points():
    f = ScalarLinearField(-1.0, 1)
    sol = integrate(f, [1.0], 0, 2, cfg=TIGHT, save_ts=[0.0, 1.0, 2.0])
    cot = np.array([[0.0], [1.0], [1.0]])
    gy, _ = dto_backprop(sol, f, cot)
    assert gy[0] == pytest.approx(np.exp(-1) + np.exp(-2), rel=1e-8)


# ---------------------------------------------------------------- continuous adjoint


@pytest.mark.parametrize("lam", [-1.0, 0.5])
def test_otd_closed_form_adjoint(lam):
    T, y0 = 1.5, 2.0
    f = ScalarLinearField(lam, 1)
    yT = y0 * np.exp(lam * T)
    res = otd_ode_backprop(f, [yT], T, 0.0, [1.0], cfg=TIGHT)
    assert res.grad_y0 == pytest.approx([np.exp(lam * T)], rel=1e-7)
    # dL/dlam = d/dlam y0 e^{lam T} = T y(T)
    assert res.grad_params == pytest.approx([T * yT], rel=1e-7)
    assert res.y0_reconstructed == pytest.approx([y0], rel=1e-7)


def test_otd_zero_cotangent(mlp_field):
    res = otd_ode_backprop(mlp_field, [0.2, 0.1], 1.0, 0.0, np.zeros(2))
    assert not res.grad_y0.any() and not res.grad_params.any()


def test_otd_gap_to_dto_shrinks_with_tolerance():
    f = ScalarLinearField(-1.0, 1)
    gaps = []
    for rtol in [1e-3, 1e-5, 1e-7, 1e-9]:
        cfg = ControllerConfig(rtol=rtol, atol=rtol * 1e-2)
        sol = integrate(f, [1.0], 0, 5, cfg=cfg)
        _, gp = dto_backprop(sol, f, [1.0])
        res = otd_ode_backprop(f, sol.y_final, 5.0, 0.0, [1.0], cfg=cfg)
        gaps.append(abs(res.grad_params[0] - gp[0]))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_otd_backward_blow_up_is_reported():
    cube = FunctionField(lambda t, y, p: -y ** 3, lambda t, y, p: (-3 * y ** 2)[..., None], 1, 1)
    # backward from y(1) = 1 the exact solution is infinite at t = 0.5
    with pytest.raises(BlowUpError, match="t="):
        otd_ode_backprop(cube, np.array([1.0]), 1.0, 0.0, np.array([1.0]))


# ---------------------------------------------------------------- interpolated adjoint


def test_interpolated_exact_for_linear_in_time_solution():
    f = ConstantField(np.array([0.5, -1.0]), 2)
    sol = integrate(f, [1.0, 2.0], 0, 2, fixed_dt=1.0)
    a = otd_interpolated_backprop(f, sol, [1.0, 3.0], cfg=TIGHT)
    b = otd_ode_backprop(f, sol.y_final, 2.0, 0.0, [1.0, 3.0], cfg=TIGHT)
    assert np.allclose(a.grad_y0, b.grad_y0, atol=1e-10)
    assert np.allclose(a.grad_params, b.grad_params, atol=1e-10)


def test_interpolated_converges_with_knots(mlp_field):
    y0, c = np.array([0.4, -0.2]), np.array([1.0, 0.5])
    ref = integrate(mlp_field, y0, 0, 2, cfg=TIGHT)
    _, gp = dto_backprop(ref, mlp_field, c)
    errs = []
    for k in [3, 5, 9, 17]:
        sol = integrate(mlp_field, y0, 0, 2, cfg=TIGHT, save_ts=np.linspace(0, 2, k))
        errs.append(rel(otd_interpolated_backprop(mlp_field, sol, c, cfg=TIGHT).grad_params, gp))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-5


def test_interpolated_beats_plain_adjoint_when_backward_unstable():
    f = rotated_stiff()
    y0, c = np.array([1.0, 0.5]), np.array([1.0, -2.0])
    cfg = ControllerConfig(rtol=1e-3, atol=1e-5)
    sol = integrate(f, y0, 0, 2, cfg=cfg, save_ts=np.linspace(0, 2, 201))
    cot = np.zeros_like(sol.ys)
    cot[-1] = c
    _, gp = dto_backprop(sol, f, cot)
    interp = rel(otd_interpolated_backprop(f, sol, c, cfg=cfg).grad_params, gp)
    plain = rel(otd_ode_backprop(f, sol.y_final, 2.0, 0.0, c, cfg=cfg).grad_params, gp)
    assert interp < 1e-4
    assert plain > 10 * interp


def test_interpolant_rejects_out_of_range():
    from ndesolve.adjoint import HermiteInterpolant

    f = ScalarLinearField(-1.0, 1)
    h = HermiteInterpolant(f, [0.0, 1.0], [[1.0], [np.exp(-1)]])
    with pytest.raises(ContractError):
        h(1.5)


# ---------------------------------------------------------------- checkpointing


def test_checkpointed_every_step_matches_dto(mlp_field):
    # both sides approximate the true gradient, so the solves must be well inside 1e-9
    cfg = ControllerConfig(rtol=1e-10, atol=1e-12)
    y0, c = np.array([0.4, -0.7]), np.array([1.0, 0.3])
    sol = integrate(mlp_field, y0, 0, 1, cfg=cfg)
    gy, gp = dto_backprop(sol, mlp_field, c)
    res = otd_checkpointed_backprop(mlp_field, checkpoints_from_solution(sol), c, cfg=cfg)
    assert rel(res.grad_params, gp) < 1e-9
    assert rel(res.grad_y0, gy) < 1e-9


def test_single_segment_equals_plain_adjoint(mlp_field):
    sol = integrate(mlp_field, [0.1, 0.3], 0, 1)
    c = np.array([1.0, 1.0])
    a = otd_checkpointed_backprop(mlp_field, [(0.0, sol.ys[0]), (1.0, sol.ys[-1])], c)
    b = otd_ode_backprop(mlp_field, sol.ys[-1], 1.0, 0.0, c)
    assert np.array_equal(a.grad_params, b.grad_params)
    assert np.array_equal(a.grad_y0, b.grad_y0)


def test_more_checkpoints_shrink_reconstruction_residual():
    f = rotated_stiff()
    cfg = ControllerConfig(rtol=1e-4, atol=1e-6)
    sol = integrate(f, [1.0, 0.5], 0, 2, cfg=cfg, save_ts=np.linspace(0, 2, 65))
    pts = list(zip(sol.ts, sol.ys))
    residuals = []
    for C in [1, 2, 4, 8, 16, 32, 64]:
        idx = np.linspace(0, 64, C + 1).astype(int)
        residuals.append(otd_checkpointed_backprop(f, [pts[i] for i in idx], [1.0, -2.0], cfg=cfg).max_residual)
    assert all(b <= 0.5 * a for a, b in zip(residuals, residuals[1:]))


def test_unordered_checkpoints_rejected(mlp_field):
    with pytest.raises(ContractError):
        otd_checkpointed_backprop(mlp_field, [(1.0, np.zeros(2)), (0.0, np.zeros(2))], np.ones(2))


# ---------------------------------------------------------------- CDE adjoint


def _identity_path(t1=2.0):
    ts = np.linspace(0, t1, 9)
    return build_interpolation(TimeSeries(ts, ts), "linear")


def test_cde_identity_control_is_ode(mlp_field):
    path = _identity_path()
    y0, c = np.array([0.2, 0.1]), np.array([1.0, -1.0])
    yT = integrate(mlp_field, y0, 0, 2, cfg=TIGHT, record=False).y_final
    a = otd_cde_backprop(mlp_field, path, yT, c, cfg=TIGHT)
    b = otd_ode_backprop(mlp_field, yT, 2.0, 0.0, c, cfg=TIGHT)
    assert np.allclose(a.grad_params, b.grad_params, rtol=1e-12, atol=1e-14)


def test_cde_constant_field_keeps_adjoint_constant():
    ts = np.linspace(0, 1, 6)
    path = build_interpolation(TimeSeries(ts, np.c_[np.sin(ts), ts ** 2]), "hermite_cubic_bd")
    f = ConstantField(np.arange(4.0), 2)
    res = otd_cde_backprop(f, path, [1.0, 1.0], [0.3, -0.4])
    assert np.allclose(res.grad_y0, [0.3, -0.4], atol=1e-14)


def test_cde_linear_field_matches_dto():
    ts = np.array([0.0, 0.4, 1.1, 1.5, 2.3, 3.0])
    path = build_interpolation(TimeSeries(ts, np.c_[ts, np.cos(2 * ts)]), "linear")
    f = LinearField(np.array([[0.1, -0.4], [0.3, 0.2], [-0.5, 0.1], [0.2, 0.3]]))
    g = cde_to_ode(f, path)
    y0, c = np.array([1.0, -0.5]), np.array([0.7, 1.0])
    jumps = [j for j in g.jumps if 0 < j < 3]
    sol = integrate(g, y0, 0, 3, cfg=TIGHT, jumps=jumps)
    gy, gp = dto_backprop(sol, g, c)
    res = otd_cde_backprop(f, path, sol.y_final, c, cfg=TIGHT)
    assert rel(res.grad_params, gp) < 1e-6 and rel(res.grad_y0, gy) < 1e-6


def test_seminorm_never_costs_more_on_value_and_integral():
    counts = {}
    for scheme in ["natural_cubic", "hermite_cubic_bd"]:
        p = value_and_integral_cde(scheme=scheme)
        yT = p.exact()
        for mode in ["rms_full", "adjoint_seminorm"]:
            r = otd_cde_backprop(p.field, p.path, yT, [0.0, 1.0], cfg=ControllerConfig(), norm_mode=mode)
            counts[scheme, mode] = r.n_steps
    for scheme in ["natural_cubic", "hermite_cubic_bd"]:
        assert counts[scheme, "adjoint_seminorm"] <= counts[scheme, "rms_full"]
    assert any(counts[s, "adjoint_seminorm"] < counts[s, "rms_full"] for s in ["natural_cubic", "hermite_cubic_bd"])


# ---------------------------------------------------------------- SDE adjoint


def _additive_linear(lam, sigma, with_noise=True):
    diff = ConstantField(np.array([sigma]), 1) if with_noise else ConstantField(np.zeros(1), 1)
    return SdeField(ScalarLinearField(lam, 1), diff, "additive")


def test_sde_adjoint_without_noise_is_heun_ode_adjoint():
    f = SdeField(mlp([2, 8, 2], seed=2), ConstantField(np.zeros(2), 2), "diagonal")
    src = BrownianInterval(shape=(2,), seed=0)
    yT = np.array([0.3, -0.1])
    a = otd_sde_backprop(f, src, yT, [1.0, 2.0], 0.0, 1.0, 0.05)
    b = otd_ode_backprop(f.drift, yT, 1.0, 0.0, [1.0, 2.0], HEUN, fixed_dt=0.05)
    assert np.allclose(a.grad_y0, b.grad_y0, rtol=1e-12, atol=1e-14)
    assert np.allclose(a.grad_params[: f.drift.params.size], b.grad_params, rtol=1e-12, atol=1e-14)


def test_sde_adjoint_mean_matches_closed_form():
    lam, T, n = -0.8, 1.0, 2000
    f = _additive_linear(lam, 0.6)
    src = BrownianInterval(0, T, shape=(n, 1), seed=4)
    yT = sde_solve("heun", f, np.ones((n, 1)), 0, T, 1 / 64, src)
    res = otd_sde_backprop(f, src, yT, np.ones((n, 1)), 0.0, T, 1 / 64)
    g = res.grad_y0[:, 0]
    se = g.std(ddof=1) / np.sqrt(n)
    # Heun's amplification per step differs from exp(lam dt) at O(dt^3)
    assert abs(g.mean() - np.exp(lam * T)) <= 4 * se + 1e-5
    assert np.allclose(res.y0_reconstructed, 1.0, atol=1e-2)


def test_sde_adjoint_deterministic():
    f = SdeField(mlp([2, 8, 2], seed=2), mlp([2, 8, 2], seed=5), "diagonal")
    runs = []
    for _ in range(2):
        src = BrownianInterval(shape=(2,), seed=7)
        runs.append(otd_sde_backprop(f, src, [0.1, 0.2], [1.0, 0.0], 0.0, 1.0, 0.1))
    assert np.array_equal(runs[0].grad_y0, runs[1].grad_y0)
    assert np.array_equal(runs[0].grad_params, runs[1].grad_params)


def test_sde_adjoint_rejects_ito():
    f = _additive_linear(-1.0, 0.5)
    with pytest.raises(UnsupportedNoiseError):
        otd_sde_backprop(f, BrownianInterval(shape=(1,)), [1.0], [1.0], 0, 1, 0.1, method="euler_maruyama")


# ---------------------------------------------------------------- forward sensitivity


def test_forward_sensitivity_closed_form():
    Jy, Jt = forward_sensitivity(ScalarLinearField(-0.6, 1), [2.0], 0.0, 1.5, cfg=TIGHT)
    assert Jy[0, 0] == pytest.approx(np.exp(-0.9), rel=1e-8)
    assert Jt[0, 0] == pytest.approx(1.5 * 2.0 * np.exp(-0.9), rel=1e-8)


def test_forward_sensitivity_zero_interval(mlp_field):
    Jy, Jt = forward_sensitivity(mlp_field, [0.1, 0.2], 1.0, 1.0)
    assert np.array_equal(Jy, np.eye(2)) and not Jt.any()


def test_forward_reverse_duality(mlp_field):
    y0, c = np.array([0.3, 0.4]), np.array([1.0, -2.0])
    Jy, Jt = forward_sensitivity(mlp_field, y0, 0, 1, cfg=TIGHT)
    yT = integrate(mlp_field, y0, 0, 1, cfg=TIGHT, record=False).y_final
    res = otd_ode_backprop(mlp_field, yT, 1.0, 0.0, c, cfg=TIGHT)
    assert rel(Jy.T @ c, res.grad_y0) < 1e-6
    assert rel(Jt.T @ c, res.grad_params) < 1e-6


# ---------------------------------------------------------------- all regimes together


def test_regimes_agree_on_smooth_problem():
    f = mlp([2, 16, 2], seed=11)
    y0, c, T = np.array([0.5, -0.3]), np.array([0.8, 1.2]), 1.0
    sol = integrate(f, y0, 0, T, cfg=TIGHT, save_ts=np.linspace(0, T, 41))
    cot = np.zeros_like(sol.ys)
    cot[-1] = c
    grads = {"dto": dto_backprop(sol, f, cot)}
    r = otd_ode_backprop(f, sol.y_final, T, 0, c, cfg=TIGHT)
    grads["otd"] = (r.grad_y0, r.grad_params)
    r = otd_interpolated_backprop(f, sol, c, cfg=TIGHT)
    grads["interpolated"] = (r.grad_y0, r.grad_params)
    full = integrate(f, y0, 0, T, cfg=TIGHT)
    r = otd_checkpointed_backprop(f, checkpoints_from_solution(full), c, cfg=TIGHT)
    grads["checkpointed"] = (r.grad_y0, r.grad_params)
    rs = reversible_integrate("reversible_heun", f, y0, 0, T, dt=1e-3)
    grads["reversible"] = reversible_backprop("reversible_heun", f, rs.terminal_state, rs.dt_schedule, c)
    Jy, Jt = forward_sensitivity(f, y0, 0, T, cfg=TIGHT)
    grads["forward"] = (Jy.T @ c, Jt.T @ c)
    names = list(grads)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert rel(grads[a][0], grads[b][0]) < 1e-4, (a, b)
            assert rel(grads[a][1], grads[b][1]) < 1e-4, (a, b)


def test_dto_matches_fd_on_adaptive_solves():
    cfg = ControllerConfig(rtol=1e-6, atol=1e-8)
    rng = np.random.default_rng(99)
    for k in range(5):
        f = mlp([2, 8, 2], seed=100 + k)
        y0, c = rng.standard_normal(2) * 0.5, rng.standard_normal(2)
        sol = integrate(f, y0, 0, 1, cfg=cfg)
        gy, gp = dto_backprop(sol, f, c)
        fy, fp = loss_grads_fd(f, y0, c, 1.0, cfg)
        assert rel(gy, fy) < 1e-4 and rel(gp, fp) < 1e-4
