import numpy as np
import pytest

from nemfc.errors import BlowUpError, NonConvergenceError, ShapeError
from nemfc.grid import make_uniform_grid
from nemfc.model import GenericModel, InitialCondition, LQModel, lq_as_generic
from nemfc.riccati import feedback_control, solve_all
from nemfc.simulate import (propagate_means, simulate_closed_loop, simulate_open_loop,
                            simulate_variation, summary_rows, time_grid)

from instances import random_instance, two_community


def _zero_feedback_setup(n=3, **kw):
    model = LQModel.build(n, R=1.0, **kw)
    grid = make_uniform_grid(n)
    return model, grid, solve_all(model, grid, 20)


def test_means_constant_without_drift():
    model, grid, sol = _zero_feedback_setup(gamma=0.5)
    m0 = np.array([[1.0], [2.0], [-1.0]])
    mp = propagate_means(model, sol, grid, m0)
    assert np.all(mp.m == m0[None])
    assert mp.times[-1] == 1.0 and mp.n_steps == 20


def test_means_linear_in_time_with_constant_drift():
    beta = np.array([[0.5], [1.0], [-2.0]])
    model, grid, sol = _zero_feedback_setup(beta=beta)
    mp = propagate_means(model, sol, grid, np.zeros((3, 1)))
    assert np.allclose(mp.m, mp.times[:, None, None] * beta[None], atol=1e-14)


def test_means_input_checks():
    model, grid, sol = _zero_feedback_setup()
    with pytest.raises(ValueError):
        propagate_means(model, sol, make_uniform_grid(4), np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        propagate_means(model, sol, grid, np.zeros((3, 2)))


def _euler_particle(model, sol, grid, x0, means):
    """Noiseless Euler path of one particle per label, coupled through the given means."""
    times = sol.times
    dt = times[1] - times[0]
    w = grid.weights
    x = [np.array(x0, dtype=float)]
    for k, t in enumerate(times[:-1]):
        K, Kb, Lam = sol.at(t)
        cur = x[-1]
        mk = means[k]
        a = np.empty((model.n_labels, model.m))
        for i in range(model.n_labels):
            Rinv = np.linalg.inv(model.R[i])
            coupled = sum(w[j] * (model.B[i].T @ Kb[i, j] + model.G_I[i, j]) @ mk[j]
                          for j in range(model.n_labels))
            a[i] = -Rinv @ ((model.B[i].T @ K[i] + model.Gamma[i]) @ cur[i] + coupled
                            + model.B[i].T @ Lam[i])
        drift = np.array([model.beta[i] + model.A[i] @ cur[i] + model.B[i] @ a[i]
                          + sum(w[j] * model.G_A[i, j] @ mk[j] for j in range(model.n_labels))
                          for i in range(model.n_labels)])
        x.append(cur + dt * drift)
    return np.array(x)


def test_noiseless_particles_follow_mean_path():
    model, grid, _ = two_community(gamma=False)
    sol = solve_all(model, grid, 40)
    init = InitialCondition.constant(np.linspace(0.5, 1.5, 8)[:, None])
    mp = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, mp, 5, seed=1, init=init)
    assert np.max(np.abs(ens.X - ens.X[:, :, :1])) == 0.0
    euler = _euler_particle(model, sol, grid, init.mean, mp.m)
    assert np.max(np.abs(ens.X[:, :, 0, :] - euler)) <= 1e-10


def test_noiseless_particles_approach_rk4_means_at_first_order():
    model, grid, init = two_community(gamma=False)
    gaps = []
    for S in (100, 200, 400):
        sol = solve_all(model, grid, S)
        mp = propagate_means(model, sol, grid, init.mean)
        ens = simulate_closed_loop(model, sol, mp, 1, seed=0)
        gaps.append(np.abs(ens.X[:, :, 0] - mp.m).max())
    assert 1.8 <= gaps[0] / gaps[1] <= 2.2 and 1.8 <= gaps[1] / gaps[2] <= 2.2


def test_same_seed_bitwise_identical():
    model, grid, init = two_community()
    sol = solve_all(model, grid, 20)
    mp = propagate_means(model, sol, grid, init.mean)
    a = simulate_closed_loop(model, sol, mp, 200, seed=3, init=init)
    b = simulate_closed_loop(model, sol, mp, 200, seed=3, init=init)
    c = simulate_closed_loop(model, sol, mp, 200, seed=4, init=init)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.dW, b.dW)
    assert not np.array_equal(a.X, c.X)


def test_random_walk_variance():
    model, grid, sol = _zero_feedback_setup(n=2, gamma=1.0)
    mp = propagate_means(model, sol, grid, np.zeros((2, 1)))
    ens = simulate_closed_loop(model, sol, mp, 20000, seed=11)
    XT = ens.X[-1, :, :, 0]
    N = XT.shape[1]
    var = XT.var(axis=1, ddof=1)
    stderr = np.sqrt(2.0 / (N - 1)) * 1.0
    assert np.all(np.abs(var - 1.0) <= 4 * stderr)


def test_closed_loop_blow_up():
    model = LQModel.build(1, A=400.0, R=1.0)
    grid = make_uniform_grid(1)
    sol = solve_all(model, grid, 10)
    mp_times = time_grid(1.0, 10)
    from nemfc.simulate import MeanPath
    mp = MeanPath(mp_times, np.zeros((11, 1, 1)))
    with pytest.raises(BlowUpError):
        simulate_closed_loop(model, sol, mp, 2, seed=0, init=np.full((1, 2, 1), 1e300))


def test_closed_loop_means_match_mean_ode():
    model, grid, init = two_community()
    sol = solve_all(model, grid, 100)
    mp = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, mp, 5000, seed=2, init=init)
    se = ens.X.std(axis=2, ddof=1) / np.sqrt(5000)
    assert np.all(np.abs(ens.empirical_means() - mp.m) <= 4 * se + 1e-12)


# generic-model simulation -------------------------------------------------


def _state_vol_model(seed=0, n=3, couple=True):
    """Generic linear model with state- and action-dependent volatility."""
    model, grid = random_instance(seed, n_labels=n)
    base = lq_as_generic(model, grid)
    rs = np.random.default_rng(seed)
    fields = {f: getattr(base, f) for f in base.__dataclass_fields__}
    d, k, m = base.d, base.n_noise, base.m
    fields.update(
        s1=0.1 * rs.normal(size=(n, n, d, k, d)) if couple else np.zeros((n, n, d, k, d)),
        s2=0.2 * rs.normal(size=(n, d, k, d)),
        s3=0.2 * rs.normal(size=(n, d, k, m)),
    )
    if not couple:
        fields["b1"] = np.zeros_like(base.b1)
    return GenericModel(**fields)


def test_open_loop_without_coupling_needs_one_sweep():
    gm = _state_vol_model(couple=False)
    rs = np.random.default_rng(0)
    control = rs.normal(size=(11, 3, 50, 2))
    X0 = rs.normal(size=(3, 50, 2))
    one = simulate_open_loop(gm, control, X0, 50, 10, seed=1, n_picard=1)
    five = simulate_open_loop(gm, control, X0, 50, 10, seed=1, n_picard=5)
    assert np.array_equal(one.X, five.X)
    assert max(five.info["picard_deltas"][1:]) == 0.0


def test_open_loop_feedback_matches_mean_ode():
    model, grid, init = two_community()
    sol = solve_all(model, grid, 100)
    gm = lq_as_generic(model, grid)
    mp = propagate_means(model, sol, grid, init.mean)

    def control(step, t, i, x, means):
        return feedback_control(sol, t, i, x, means)

    ens = simulate_open_loop(gm, control, init, 4000, 100, seed=5, sequential=True)
    se = ens.X.std(axis=2, ddof=1) / np.sqrt(4000)
    assert np.all(np.abs(ens.empirical_means() - mp.m) <= 4 * se + 1e-12)


def test_picard_deltas_decrease_on_short_horizon():
    model, grid, init = two_community(T=0.3)
    gm = lq_as_generic(model, grid)
    sol = solve_all(model, grid, 30)

    def control(step, t, i, x, means):
        return feedback_control(sol, t, i, x, means)

    ens = simulate_open_loop(gm, control, init, 500, 30, seed=2, n_picard=6)
    d = ens.info["picard_deltas"]
    assert all(b <= a for a, b in zip(d[1:], d[2:]))
    assert d[-1] < 1e-3 * d[0]


def test_picard_cap_raises_with_delta():
    model, grid, init = two_community()
    gm = lq_as_generic(model, grid)
    sol = solve_all(model, grid, 20)

    def control(step, t, i, x, means):
        return feedback_control(sol, t, i, x, means)

    with pytest.raises(NonConvergenceError) as info:
        simulate_open_loop(gm, control, init, 100, 20, seed=2, n_picard=2, tol=1e-14)
    assert info.value.residual > 1e-14


def test_open_loop_shape_checks():
    gm = _state_vol_model()
    with pytest.raises(ShapeError):
        simulate_open_loop(gm, np.zeros((5, 3, 10, 2)), np.zeros((3, 10, 2)), 10, 10, seed=0)
    with pytest.raises(ShapeError):
        simulate_open_loop(gm, np.zeros((11, 3, 10, 2)), np.zeros((3, 9, 2)), 10, 10, seed=0)


def test_variation_zero_direction():
    gm = _state_vol_model()
    rs = np.random.default_rng(1)
    control = rs.normal(size=(21, 3, 30, 2))
    base = simulate_open_loop(gm, control, rs.normal(size=(3, 30, 2)), 30, 20, seed=3, sequential=True)
    V = simulate_variation(gm, base, np.zeros_like(control))
    assert np.all(V.V == 0)


@pytest.mark.parametrize("couple", [False, True])
def test_variation_equals_difference_quotient(couple):
    gm = _state_vol_model(seed=2, couple=couple)
    rs = np.random.default_rng(4)
    N, S = 40, 25
    control = rs.normal(size=(S + 1, 3, N, 2))
    delta = rs.normal(size=control.shape)
    X0 = rs.normal(size=(3, N, 2))
    base = simulate_open_loop(gm, control, X0, N, S, seed=6, sequential=True)
    V = simulate_variation(gm, base, delta).V
    assert np.all(V[0] == 0)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        pert = simulate_open_loop(gm, control + eps * delta, X0, N, S, seed=6, sequential=True)
        errs.append(np.abs((pert.X - base.X) / eps - V).max())
    # the state equation is linear, so the quotient is exact up to rounding
    scale = np.abs(V).max()
    assert max(errs) <= 1e-8 * scale / 1e-3


def test_variation_checks():
    gm = _state_vol_model()
    rs = np.random.default_rng(1)
    control = rs.normal(size=(11, 3, 5, 2))
    base = simulate_open_loop(gm, control, np.zeros((3, 5, 2)), 5, 10, seed=3, sequential=True)
    with pytest.raises(ValueError):
        simulate_variation(gm, base, np.zeros((11, 3, 6, 2)))


def test_summary_rows():
    model, grid, init = two_community(n_labels=2)
    sol = solve_all(model, grid, 4)
    mp = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, mp, 10, seed=0, init=init)
    rows = summary_rows(ens)
    assert len(rows) == 5 * 2
    assert rows[3][:2] == (ens.times[1], 1)
    assert rows[3][2] == pytest.approx(ens.X[1, 1, :, 0].mean())
