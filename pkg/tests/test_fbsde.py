import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nemfc.adjoint import adjoint_path
from nemfc.errors import NonConvergenceError, ShapeError
from nemfc.fbsde import (ContinuationSchedule, FbsdeState, InputBundle, adjoint_bsde, snorm,
                         snorm_diff, solve_continuation_step, solve_decoupled, solve_full,
                         summary_rows)
from nemfc.grid import make_uniform_grid
from nemfc.model import InitialCondition, LQModel, lq_as_generic
from nemfc import rng
from nemfc.riccati import solve_all
from nemfc.simulate import propagate_means, simulate_closed_loop, time_grid

from instances import two_community


def _state(seed, S=3, n=2, N=4, d=2, k=1, m=1):
    rs = np.random.default_rng(seed)
    return FbsdeState(time_grid(1.0, S), rs.normal(size=(S + 1, n, N, d)),
                      rs.normal(size=(S + 1, n, N, d)), rs.normal(size=(S + 1, n, N, d, k)),
                      rs.normal(size=(S + 1, n, N, m)))


def test_snorm_zero_and_homogeneous():
    grid = make_uniform_grid(2)
    th = _state(0)
    zero = FbsdeState(th.times, 0 * th.X, 0 * th.Y, 0 * th.Z, 0 * th.alpha)
    assert snorm(grid, zero) == 0.0
    double = FbsdeState(th.times, 2 * th.X, 2 * th.Y, 2 * th.Z, 2 * th.alpha)
    assert snorm(grid, double) == pytest.approx(2 * snorm(grid, th), rel=1e-14)


def test_snorm_hand_computation():
    grid = make_uniform_grid(1)
    th = FbsdeState(np.array([0.0, 0.5, 1.0]),
                    np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1),
                    np.array([0.0, -1.0, 0.5]).reshape(3, 1, 1, 1),
                    np.array([1.0, 2.0, 5.0]).reshape(3, 1, 1, 1, 1),
                    np.array([3.0, 0.0, 7.0]).reshape(3, 1, 1, 1))
    # sup X^2 = 9, sup Y^2 = 1, Z and alpha summed over the first two steps with dt = 1/2
    assert snorm(grid, th) == pytest.approx(np.sqrt(9 + 1 + 2.5 + 4.5), rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_snorm_triangle_inequality(s1, s2):
    grid = make_uniform_grid(2)
    a, b = _state(s1), _state(s2)
    total = FbsdeState(a.times, a.X + b.X, a.Y + b.Y, a.Z + b.Z, a.alpha + b.alpha)
    assert snorm(grid, total) <= snorm(grid, a) + snorm(grid, b) + 1e-12
    assert snorm_diff(grid, a, b) >= 0


def test_snorm_shape_checks():
    with pytest.raises(ShapeError):
        snorm_diff(make_uniform_grid(2), _state(0), _state(1, N=5))
    with pytest.raises(ShapeError):
        FbsdeState(time_grid(1.0, 3), np.zeros((4, 2, 3, 1)), np.zeros((4, 2, 3, 2)),
                   np.zeros((4, 2, 3, 1, 1)), np.zeros((4, 2, 3, 1)))


def test_schedule_validation_and_gammas():
    g = ContinuationSchedule(eta=0.3).gammas()
    assert len(g) == 4 and g[-1] == 1.0 and g[0] == 0.3
    assert ContinuationSchedule(eta=0.25).gammas() == [0.25, 0.5, 0.75, 1.0]
    for bad in ({"eta": 0.0}, {"eta": 1.5}, {"tol": 0.0}, {"scheme": "other"}):
        with pytest.raises(ValueError):
            ContinuationSchedule(**bad)


def _decoupled(inputs_fn, n=1, N=10_000, S=20, d=1, k=1, seed=0):
    grid = make_uniform_grid(n)
    times = time_grid(1.0, S)
    inputs = InputBundle.zeros(S, n, N, d, k)
    xi = np.zeros((n, N, d))
    inputs_fn(inputs, times)
    return solve_decoupled(grid, times, xi, inputs, seed)


def test_decoupled_constant_terminal():
    def setup(inp, times):
        inp.sigma[...] = 1.0
        inp.g[...] = 2.5
    st_ = _decoupled(setup, N=500)
    assert np.allclose(st_.Y, 2.5, atol=1e-12)
    assert np.allclose(st_.Z, 0.0, atol=1e-12)


def test_decoupled_brownian_martingale():
    S = 20
    dt = 1.0 / S
    n, N = 1, 10_000
    dW = rng.brownian_increments(0, S, n, N, 1, dt)
    X = np.concatenate([np.zeros((1, n, N, 1)), np.cumsum(dW, axis=0)])

    def setup(inp, times):
        inp.sigma[...] = 1.0
        inp.g[...] = X[-1]
    st_ = _decoupled(setup)
    assert np.allclose(st_.X, X, atol=1e-12)
    assert np.max(np.abs(st_.Y - st_.X)) <= 1e-2
    assert np.max(np.abs(st_.Z[:-1] - 1.0)) <= 1e-2


def test_decoupled_deterministic_integral():
    def setup(inp, times):
        inp.sigma[...] = 0.5
        inp.f[...] = 1.0
    st_ = _decoupled(setup, N=300)
    assert np.allclose(st_.Y[:, 0, :, 0], (1.0 - st_.times)[:, None], atol=1e-12)


def test_decoupled_degenerate_design_falls_back():
    # no noise and identical starts: every regression design is rank one
    def setup(inp, times):
        inp.b[...] = 1.0
        inp.g[...] = 3.0
    st_ = _decoupled(setup, N=50)
    assert st_.info["fallback_steps"] == list(range(20))
    assert np.allclose(st_.Y, 3.0)


def test_decoupled_shape_check():
    grid = make_uniform_grid(1)
    with pytest.raises(ShapeError):
        solve_decoupled(grid, time_grid(1.0, 5), np.zeros((1, 10, 1)),
                        InputBundle.zeros(4, 1, 10, 1, 1), 0)


# continuation -------------------------------------------------------------


def _small(n_labels=4, T=1.0):
    model, grid, init = two_community(n_labels=n_labels, T=T)
    return model, grid, init, lq_as_generic(model, grid)


def test_gamma_zero_equals_decoupled():
    model, grid, init, gm = _small()
    xi = init.sample(400, 1)
    sched = ContinuationSchedule()
    a = solve_continuation_step(gm, 0.0, xi, None, None, sched, 1, n_steps=10)
    times = time_grid(model.T, 10)
    b = solve_decoupled(grid, times, xi, InputBundle.zeros(10, 4, 400, 1, 1), 1)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y) and np.array_equal(a.Z, b.Z)
    assert len(a.info["history"]) == 1


def test_gamma_out_of_range():
    _, _, init, gm = _small()
    with pytest.raises(ValueError):
        solve_continuation_step(gm, 1.5, init.sample(10, 0), None, None, ContinuationSchedule(), 0, 5)


def test_picard_history_geometric():
    model, grid, init, gm = _small(T=0.5)
    sched = ContinuationSchedule(tol=1e-8)
    st_ = solve_continuation_step(gm, 1.0, init.sample(2000, 2), None, None, sched, 2, n_steps=10)
    h = st_.info["history"]
    assert h[-1] <= 1e-8
    ratios = [b / a for a, b in zip(h[2:], h[3:])]
    assert ratios and max(ratios) < 1.0


def test_pathwise_picard_contracts_over_two_sweeps():
    # the literal map alternates between large and small steps; every second sweep contracts
    model, grid, init, gm = _small(T=0.5)
    sched = ContinuationSchedule(tol=1e-6, scheme="pathwise")
    st_ = solve_continuation_step(gm, 1.0, init.sample(2000, 2), None, None, sched, 2, n_steps=10)
    h = st_.info["history"]
    assert h[-1] <= 1e-6
    assert all(c < a for a, c in zip(h[2:], h[4:]))


def test_fixed_point_independent_of_start():
    model, grid, init, gm = _small(T=0.5)
    xi = init.sample(1000, 3)
    tol = 1e-8
    sched = ContinuationSchedule(tol=tol)
    a = solve_continuation_step(gm, 1.0, xi, None, None, sched, 3, n_steps=10)
    start = FbsdeState(a.times, a.X + 0.5, a.Y - 1.0, a.Z, a.alpha + 0.3)
    b = solve_continuation_step(gm, 1.0, xi, None, start, sched, 3)
    assert snorm_diff(grid, a, b) <= 2 * tol * 10


def test_iteration_cap_raises():
    _, _, init, gm = _small()
    with pytest.raises(NonConvergenceError) as info:
        solve_continuation_step(gm, 1.0, init.sample(200, 0), None, None,
                                ContinuationSchedule(max_iter=2, tol=1e-12), 0, n_steps=10)
    assert info.value.residual > 1e-12


def test_zero_cost_model_has_zero_adjoint():
    model = LQModel.build(3, beta=0.5, A=-0.3, B=1.0, gamma=0.4, R=1e-300 + 1.0)
    gm = lq_as_generic(model)
    # f = a' R a only: with zero state costs the optimal action and adjoint vanish
    init = InitialCondition.gaussian(np.ones((3, 1)), 0.1)
    st_ = solve_full(gm, init, ContinuationSchedule(), 0, 10, 300)
    assert np.max(np.abs(st_.Y)) <= 1e-12 and np.max(np.abs(st_.alpha)) <= 1e-12


def test_uncoupled_labels_match_single_agent_solves():
    model, grid, init, _ = _small(n_labels=3)
    zero = np.zeros_like(model.G_A)
    model = model.replace(G_A=zero, Gt_Q=zero, Gt_P=zero, G_I=zero)
    gm = lq_as_generic(model, grid)
    N, S = 800, 10
    xi = init.sample(N, 4)
    dW = rng.brownian_increments(4, S, 3, N, 1, model.T / S)
    sched = ContinuationSchedule(tol=1e-9)
    full = solve_full(gm, xi, sched, 4, S, dW=dW)
    for i in range(3):
        single = LQModel(T=model.T, **{name: getattr(model, name)[i:i + 1] for name in
                                       ("beta", "A", "B", "gamma", "Q", "R", "Gamma", "P")},
                         **{name: np.zeros((1, 1, 1, 1)) for name in ("G_A", "Gt_Q", "Gt_P", "G_I")})
        one = solve_full(lq_as_generic(single), xi[i:i + 1], sched, 4, S, dW=dW[:, i:i + 1])
        assert np.max(np.abs(one.Y[:, 0] - full.Y[:, i])) <= 1e-6
        assert np.max(np.abs(one.X[:, 0] - full.X[:, i])) <= 1e-6


def test_halving_schedules_agree():
    model, grid, init, gm = _small(T=0.5)
    xi = init.sample(800, 5)
    tol = 1e-8
    a = solve_full(gm, xi, ContinuationSchedule(eta=0.5, tol=tol), 5, 10)
    b = solve_full(gm, xi, ContinuationSchedule(eta=0.25, tol=tol), 5, 10)
    assert snorm_diff(grid, a, b) <= 3 * tol * 10
    assert [s["gamma"] for s in b.info["stages"]] == [0.25, 0.5, 0.75, 1.0]


def test_halving_on_failure_recorded():
    model, grid, init, gm = _small()
    # eta = 1 needs 10 sweeps here, eta = 1/2 at most 9
    st_ = solve_full(gm, init.sample(300, 0), ContinuationSchedule(eta=1.0, max_iter=9, tol=1e-5),
                     0, 10)
    assert st_.info["halvings"] == 1 and st_.info["eta"] == 0.5
    with pytest.raises(NonConvergenceError):
        solve_full(gm, init.sample(300, 0),
                   ContinuationSchedule(eta=1.0, max_iter=2, tol=1e-5, max_halvings=1), 0, 10)


def test_matches_riccati_on_small_instance():
    model, grid, init, gm = _small(n_labels=4)
    S, N, seed = 20, 4000, 6
    st_ = solve_full(gm, init, ContinuationSchedule(), seed, S, N)
    sol = solve_all(model, grid, S)
    means = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, means, N, seed, init=init, dW=st_.info["dW"])
    Y_ref = adjoint_path(sol, ens, means).Y
    ens_f = type(ens)(ens.times, st_.X, ens.dW, seed)
    Y_on_fbsde_paths = adjoint_path(sol, ens_f, means).Y
    rel = np.sqrt(np.mean((st_.Y - Y_on_fbsde_paths) ** 2) / np.mean(Y_on_fbsde_paths**2))
    assert rel <= 5e-2
    assert np.max(np.abs(st_.X.mean(axis=2) - means.m)) <= 0.05
    assert st_.info["min_r2"] >= 0.999
    assert Y_ref.shape == st_.Y.shape


def test_adjoint_for_fixed_control_matches_ansatz():
    model, grid, init, gm = _small(n_labels=4)
    S, N = 20, 4000
    sol = solve_all(model, grid, S)
    means = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, means, N, 2, init=init)
    st_ = adjoint_bsde(gm, ens.X, ens.alpha, ens.dW, ens.times, means=means.m)
    Y = adjoint_path(sol, ens, means).Y
    rel = np.sqrt(np.mean((st_.Y - Y) ** 2) / np.mean(Y**2))
    assert rel <= 5e-2


def test_summary_rows_layout():
    _, _, init, gm = _small(n_labels=2)
    st_ = solve_continuation_step(gm, 0.0, init.sample(20, 0), None, None, ContinuationSchedule(),
                                  0, n_steps=4)
    rows = summary_rows(st_)
    assert len(rows) == 5 * 2 and len(rows[0]) == 2 + 1 + 1 + 1
