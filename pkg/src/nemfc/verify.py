"""Cost estimation and optimality checks: Gateaux derivatives, perturbation probes,
flat-derivative and convexity checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import LabelGrid, kernel_apply
from .hamiltonian import HamiltonianPoint, grad_H, minimizer_bound
from .model import GenericModel, InitialCondition, LQModel
from .riccati import AffineFeedback, RiccatiSolution
from .simulate import (EnsemblePath, MeanPath, propagate_means, simulate_closed_loop,
                       simulate_open_loop)
from . import rng


@dataclass(frozen=True)
class CostEstimate:
    value: float
    stderr: float
    n_particles: int
    seed: int

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr,
                "n_particles": self.n_particles, "seed": self.seed}


def _weighted_mean(grid: LabelGrid, per_particle: np.ndarray):
    """Label-weighted particle average and its standard error; per_particle is (n, N)."""
    n, N = per_particle.shape
    w = grid.weights
    value = float(w @ per_particle.mean(axis=1))
    if N < 2:
        return value, 0.0
    var = per_particle.var(axis=1, ddof=1)
    return value, float(np.sqrt(np.sum(w**2 * var) / N))


def lq_cost_samples(model: LQModel, grid: LabelGrid, X, alpha, means) -> np.ndarray:
    """Per-particle cost (n, N): left Riemann sum of the running cost plus terminal cost.

    X is (S+1, n, N, d), alpha (S+1, n, N, m) or (S, ...), means (S+1, n, d).
    """
    S = X.shape[0] - 1
    dt = model.T / S
    out = np.zeros(X.shape[1:3])
    for k in range(S):
        c = kernel_apply(grid, model.Gt_Q, means[k])
        h = kernel_apply(grid, model.G_I, means[k])
        dev = X[k] - c[:, None, :]
        a = alpha[k]
        run = (np.einsum("upa,uab,upb->up", dev, model.Q, dev)
               + np.einsum("upa,uab,upb->up", a, model.R, a)
               + 2.0 * np.einsum("upa,uab,upb->up", a, model.Gamma, X[k])
               + 2.0 * np.einsum("upa,ua->up", a, h))
        out += run * dt
    e = kernel_apply(grid, model.Gt_P, means[S])
    dev = X[S] - e[:, None, :]
    out += np.einsum("upa,uab,upb->up", dev, model.P, dev)
    return out


def estimate_cost(model: LQModel, ensemble: EnsemblePath, means: MeanPath, controls=None,
                  grid: LabelGrid | None = None) -> CostEstimate:
    """Monte Carlo cost with the mean-dependent terms taken from the deterministic mean path."""
    from .grid import make_uniform_grid
    grid = grid if grid is not None else make_uniform_grid(model.n_labels)
    controls = ensemble.alpha if controls is None else np.asarray(controls, dtype=float)
    if controls is None:
        raise ValueError("ensemble carries no controls; pass them explicitly")
    if (ensemble.X.shape[1] != model.n_labels or grid.n_labels != model.n_labels
            or means.m.shape != ensemble.X.shape[:2] + (model.d,)):
        raise ValueError("grids of model, ensemble and mean path disagree")
    samples = lq_cost_samples(model, grid, ensemble.X, controls, means.m)
    value, se = _weighted_mean(grid, samples)
    return CostEstimate(value, se, ensemble.n_particles, ensemble.seed)


def generic_cost_samples(model: GenericModel, X, alpha, means=None) -> np.ndarray:
    S = X.shape[0] - 1
    dt = model.T / S
    means = X.mean(axis=2) if means is None else means
    n = model.n_labels
    out = np.zeros(X.shape[1:3])
    for k in range(S):
        for i in range(n):
            out[i] += model.f(i, X[k, i], means[k], alpha[k, i]) * dt
    for i in range(n):
        out[i] += model.g(i, X[S, i], means[S])
    return out


def estimate_cost_generic(model: GenericModel, ensemble: EnsemblePath, controls=None,
                          means=None) -> CostEstimate:
    """Cost through the model oracles; mean terms use the ensemble's empirical means by default."""
    controls = ensemble.alpha if controls is None else controls
    samples = generic_cost_samples(model, ensemble.X, controls, means)
    value, se = _weighted_mean(model.grid, samples)
    return CostEstimate(value, se, ensemble.n_particles, ensemble.seed)


# ----------------------------------------------------------------------------
# Gateaux derivative


@dataclass(frozen=True)
class GateauxEstimate:
    value: float
    stderr: float

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr}


@dataclass
class ThetaPaths:
    """State, adjoint and control paths on a common grid; Z may be (S+1, n, d, k)."""
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    alpha: np.ndarray
    means: np.ndarray | None = None


def gateaux_via_hamiltonian(model: GenericModel, paths, direction) -> GateauxEstimate:
    """int_I E[ int_0^T d_a H . direction dt ] du with left Riemann sums in time."""
    X, Y, Z, alpha = paths.X, paths.Y, paths.Z, paths.alpha
    direction = np.asarray(direction, dtype=float)
    S = X.shape[0] - 1
    n, N = X.shape[1], X.shape[2]
    if direction.shape[:3] not in ((S + 1, n, N), (S, n, N)) or direction.shape[-1] != model.m:
        raise ValueError("direction does not match the paths")
    if Y.shape != X.shape or alpha.shape[:3] != X.shape[:3]:
        raise ValueError("paths have inconsistent shapes")
    means = getattr(paths, "means", None)
    means = X.mean(axis=2) if means is None else means
    dt = (paths.times[-1] - paths.times[0]) / S
    acc = np.zeros((n, N))
    for k in range(S):
        for i in range(n):
            z = Z[k, i] if Z.ndim == 5 else np.broadcast_to(Z[k, i], (N,) + Z.shape[-2:])
            p = HamiltonianPoint(i, X[k, i], means[k], Y[k, i], z, alpha[k, i])
            ha = grad_H(model, p)[1]
            acc[i] += np.einsum("pm,pm->p", ha, direction[k, i]) * dt
    value, se = _weighted_mean(model.grid, acc)
    return GateauxEstimate(value, se)


def _as_array_control(control, S, n, N, m):
    arr = np.asarray(control, dtype=float)
    if arr.shape != (S + 1, n, N, m):
        raise ValueError(f"control must have shape {(S + 1, n, N, m)}")
    return arr


def gateaux_via_finite_difference(model: GenericModel, control, direction, eps: float, seed: int,
                                  init, n_steps: int | None = None, dW=None) -> GateauxEstimate:
    """(J(a + eps d) - J(a - eps d)) / (2 eps) with common noise and initial states.

    `control` and `direction` are arrays (S+1, n, N, m) of actions; states
    are simulated with sequentially updated empirical means, and the cost
    uses the empirical means of each run.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    control = np.asarray(control, dtype=float)
    direction = np.asarray(direction, dtype=float)
    S = control.shape[0] - 1 if n_steps is None else n_steps
    n, N = model.n_labels, control.shape[2]
    control = _as_array_control(control, S, n, N, model.m)
    direction = _as_array_control(direction, S, n, N, model.m)
    X0 = init.sample(N, seed) if isinstance(init, InitialCondition) else np.asarray(init, dtype=float)
    if dW is None:
        dW = rng.brownian_increments(seed, S, n, N, model.n_noise, model.T / S)
    costs = []
    for sign in (1.0, -1.0):
        ens = simulate_open_loop(model, control + sign * eps * direction, X0, N, S, seed,
                                 sequential=True, dW=dW)
        costs.append(generic_cost_samples(model, ens.X, ens.alpha))
    diff = (costs[0] - costs[1]) / (2.0 * eps)
    value, se = _weighted_mean(model.grid, diff)
    return GateauxEstimate(value, se)


def feedback_direction(ensemble: EnsemblePath, shift, tilt) -> np.ndarray:
    """Direction c_i + k_i X along an ensemble: shift (n, m), tilt (n, m, d)."""
    shift = np.asarray(shift, dtype=float)
    tilt = np.asarray(tilt, dtype=float)
    return shift[None, :, None, :] + np.einsum("uma,tupa->tupm", tilt, ensemble.X)


def random_feedback_perturbation(model: LQModel, magnitude: float, seed: int, index: int):
    """Bounded random (shift, tilt) pair: entries uniform in [-magnitude, magnitude]."""
    n, m, d = model.n_labels, model.m, model.d
    u = rng.uniforms(seed, rng.DIRECTIONS, index, np.arange(n), np.arange(1), m + m * d)[:, 0, :]
    u = magnitude * (2.0 * u - 1.0)
    return u[:, :m].copy(), u[:, m:].reshape(n, m, d).copy()


# ----------------------------------------------------------------------------
# optimality probe


def optimality_probe(model: LQModel, sol: RiccatiSolution, n_perturbations: int, magnitude: float,
                     seed: int, init: InitialCondition, n_particles: int,
                     n_steps: int | None = None) -> dict:
    """Compare the optimal feedback with randomly perturbed feedback laws under common noise.

    Each perturbed law adds a constant and a state-proportional term; its
    mean path is propagated exactly, and both costs use the same Brownian
    increments and initial states.
    """
    grid = sol.grid
    fb = AffineFeedback(sol)
    S = sol.n_steps if n_steps is None else n_steps
    means = propagate_means(model, sol, grid, init.mean, S)
    X0 = init.sample(n_particles, seed)
    dW = rng.brownian_increments(seed, S, model.n_labels, n_particles, model.n_noise, model.T / S)
    base = simulate_closed_loop(model, sol, means, n_particles, seed, X0, fb, dW)
    base_samples = lq_cost_samples(model, grid, base.X, base.alpha, means.m)
    J0, se0 = _weighted_mean(grid, base_samples)
    diffs, errs = [], []
    for j in range(n_perturbations):
        shift, tilt = random_feedback_perturbation(model, magnitude, seed, j)
        pert = fb.perturbed(shift, tilt)
        m_pert = propagate_means(model, sol, grid, init.mean, S, pert)
        ens = simulate_closed_loop(model, sol, m_pert, n_particles, seed, X0, pert, dW)
        samples = lq_cost_samples(model, grid, ens.X, ens.alpha, m_pert.m)
        d, se = _weighted_mean(grid, samples - base_samples)
        diffs.append(d)
        errs.append(se)
    diffs = np.array(diffs)
    errs = np.array(errs)
    passed = bool(np.all(diffs >= -3.0 * errs))
    return {
        "pass": passed,
        "J_opt": J0,
        "J_opt_stderr": se0,
        "differences": diffs.tolist(),
        "stderrs": errs.tolist(),
        "min_difference": float(diffs.min()) if diffs.size else 0.0,
        "n_perturbations": int(n_perturbations),
        "magnitude": float(magnitude),
        "n_particles": int(n_particles),
        "seed": int(seed),
    }


# ----------------------------------------------------------------------------
# flat derivative of cylindrical functionals


@dataclass(frozen=True)
class CylindricalFunctional:
    """f(mu) = F(<phi_1, mu>, ..., <phi_k, mu>), <phi, mu> = int_I E[phi(u, X^u)] du.

    F maps (k,) -> scalar and dF gives its gradient. Each phi takes a label
    index and states (..., d) and returns (...); dphi returns (..., d).
    """
    F: Callable
    dF: Callable
    phis: Sequence[Callable]
    dphis: Sequence[Callable]

    def __post_init__(self):
        if len(self.phis) < 1 or len(self.phis) != len(self.dphis):
            raise ValueError("need at least one test function, each with a gradient")

    def moments(self, grid: LabelGrid, X) -> np.ndarray:
        n = grid.n_labels
        return np.array([sum(grid.weights[i] * np.mean(phi(i, X[i])) for i in range(n))
                         for phi in self.phis])

    def value(self, grid: LabelGrid, X) -> float:
        return float(self.F(self.moments(grid, X)))

    def derivative(self, grid: LabelGrid, X, Y) -> float:
        """int_I E[ d_x (delta f / delta m)(u, X^u) . Y^u ] du."""
        s = self.moments(grid, X)
        dF = np.asarray(self.dF(s), dtype=float)
        total = 0.0
        for j, dphi in enumerate(self.dphis):
            for i in range(grid.n_labels):
                total += dF[j] * grid.weights[i] * np.mean(np.sum(dphi(i, X[i]) * Y[i], axis=-1))
        return float(total)


def check_flat_derivative(fun: CylindricalFunctional, grid: LabelGrid, X, Y,
                          eps_list=(1e-1, 1e-2, 1e-3)) -> dict:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 3 or X.shape[0] != grid.n_labels:
        raise ValueError("samples and direction must both have shape (n_labels, N, d)")
    base = fun.value(grid, X)
    rhs = fun.derivative(grid, X, Y)
    lhs = [(fun.value(grid, X + eps * Y) - base) / eps for eps in eps_list]
    errors = [abs(v - rhs) for v in lhs]
    return {"eps": [float(e) for e in eps_list], "lhs": lhs, "rhs": rhs, "errors": errors}


# ----------------------------------------------------------------------------
# convexity and the minimizer bound


def _sample_measure(seed, index, n, M, d):
    shift = rng.normals(seed, rng.SAMPLING, 2 * index, np.arange(n), np.arange(1), d)[:, 0, :]
    spread = rng.normals(seed, rng.SAMPLING, 2 * index + 1, np.arange(n), np.arange(M), d)
    return shift[:, None, :] + spread


def check_lambda_convexity(model: GenericModel, n_samples: int = 256, seed: int = 0,
                           n_tilde: int = 16) -> dict:
    """Sample the strong convexity inequalities of f and g at random pairs.

    For each pair (x, mu, a), (x', mu', a') with empirical measures mu, mu'
    built from n_tilde particles per label, the f-slack is
        f(x',mu',a') - f(x,mu,a) - d_x f.(x'-x) - d_a f.(a'-a)
        - int E[d_x(delta f/delta m)(u, X~) . (X~' - X~)] du - lam |a'-a|^2
    and the g-slack is the same without the action terms.
    """
    n, d, m = model.n_labels, model.d, model.m
    w = model.grid.weights
    worst_f, worst_g = np.inf, np.inf
    worst_label = -1
    worst_val = np.inf
    for s in range(n_samples):
        i = s % n
        Xt = _sample_measure(seed, 2 * s, n, n_tilde, d)
        Xt2 = _sample_measure(seed, 2 * s + 1, n, n_tilde, d)
        mu, mu2 = Xt.mean(axis=1), Xt2.mean(axis=1)
        pts = rng.normals(seed, rng.SAMPLING, 4 * n_samples + s, np.arange(1), np.arange(1),
                          2 * d + 2 * m)[0, 0]
        x, x2 = pts[:d], pts[d:2 * d]
        a, a2 = pts[2 * d:2 * d + m], pts[2 * d + m:]
        flat_f = sum(w[j] * np.mean(np.sum(model.dflat_f(i, x, mu, a, j, Xt[j]) * (Xt2[j] - Xt[j]),
                                           axis=-1)) for j in range(n))
        flat_g = sum(w[j] * np.mean(np.sum(model.dflat_g(i, x, mu, j, Xt[j]) * (Xt2[j] - Xt[j]),
                                           axis=-1)) for j in range(n))
        slack_f = (model.f(i, x2, mu2, a2) - model.f(i, x, mu, a)
                   - model.dfdx(i, x, mu, a) @ (x2 - x) - model.dfda(i, x, mu, a) @ (a2 - a)
                   - flat_f - model.lam * np.sum((a2 - a) ** 2))
        slack_g = (model.g(i, x2, mu2) - model.g(i, x, mu) - model.dgdx(i, x, mu) @ (x2 - x) - flat_g)
        worst_f = min(worst_f, float(slack_f))
        worst_g = min(worst_g, float(slack_g))
        if min(slack_f, slack_g) < worst_val:
            worst_val = float(min(slack_f, slack_g))
            worst_label = i
    return {
        "min_slack_f": worst_f,
        "min_slack_g": worst_g,
        "worst_label": int(worst_label),
        "pass": bool(min(worst_f, worst_g) >= -1e-9),
        "n_samples": int(n_samples),
    }


def check_minimizer_bound(model: GenericModel, n_samples: int = 1000, seed: int = 0,
                          scale: float = 3.0) -> dict:
    """|a_hat| <= bound at random (label, x, means, y, z) tuples."""
    n, d, m, k = model.n_labels, model.d, model.m, model.n_noise
    width = 2 * d + d * k
    violations = 0
    worst_ratio = 0.0
    for s in range(n_samples):
        i = s % n
        pts = scale * rng.normals(seed, rng.SAMPLING, s, np.arange(1), np.arange(1), width)[0, 0]
        means = scale * rng.normals(seed, rng.SAMPLING, n_samples + s, np.arange(n), np.arange(1), d)[:, 0, :]
        x, y, z = pts[:d], pts[d:2 * d], pts[2 * d:].reshape(d, k)
        a = model.minimizer(i, x, means, y, z)
        bound = float(minimizer_bound(model, i, x, means, y, z))
        size = float(np.linalg.norm(a))
        if size > bound * (1 + 1e-9) + 1e-12:
            violations += 1
        if bound > 0:
            worst_ratio = max(worst_ratio, size / bound)
    return {"pass": violations == 0, "violations": violations, "max_ratio": worst_ratio,
            "n_samples": int(n_samples)}


def gateaux_check(model: LQModel, sol: RiccatiSolution, init: InitialCondition, n_particles: int,
                  seed: int, n_directions: int = 10, magnitude: float = 1.0, eps: float = 0.1,
                  refine: int = 4, floor: float = 1e-10) -> dict:
    """Both Gateaux routes at the Riccati feedback for random feedback-form directions.

    The Hamiltonian route runs on the solution's grid with the ansatz adjoint.
    The finite-difference route simulates on a grid refined `refine` times,
    so that the Euler discretization of the state does not bias the
    derivative of the cost. A direction passes when |H-route| <= 3 stderr +
    floor and the routes agree within max(3 combined stderr, 1e-3 |J|).
    """
    from .adjoint import adjoint_path
    from .model import lq_as_generic
    grid = sol.grid
    gm = lq_as_generic(model, grid)
    means = propagate_means(model, sol, grid, init.mean)
    ens = simulate_closed_loop(model, sol, means, n_particles, seed, init)
    adj = adjoint_path(sol, ens, means)
    theta = ThetaPaths(ens.times, ens.X, adj.Y, adj.Z, ens.alpha, means.m)
    J = estimate_cost(model, ens, means, grid=grid)
    fine_sol = sol if refine == 1 else _resolve(sol, sol.n_steps * refine)
    fine_means = propagate_means(model, fine_sol, grid, init.mean)
    fine = simulate_closed_loop(model, fine_sol, fine_means, n_particles, seed, init)
    rows = []
    for j in range(n_directions):
        shift, tilt = random_feedback_perturbation(model, magnitude, seed, 1000 + j)
        h = gateaux_via_hamiltonian(gm, theta, feedback_direction(ens, shift, tilt))
        fd = gateaux_via_finite_difference(gm, fine.alpha, feedback_direction(fine, shift, tilt),
                                           eps, seed, fine.X[0], dW=fine.dW)
        combined = float(np.hypot(h.stderr, fd.stderr))
        tol = max(3.0 * combined, 1e-3 * abs(J.value))
        rows.append({
            "hamiltonian": h.value, "hamiltonian_stderr": h.stderr,
            "finite_difference": fd.value, "finite_difference_stderr": fd.stderr,
            "first_order_ok": bool(abs(h.value) <= 3.0 * h.stderr + floor),
            "agreement_ok": bool(abs(h.value - fd.value) <= tol),
            "tolerance": tol,
        })
    return {
        "pass": all(r["first_order_ok"] and r["agreement_ok"] for r in rows),
        "J": J.value, "J_stderr": J.stderr, "eps": eps, "refine": refine,
        "directions": rows,
    }


def _resolve(sol: RiccatiSolution, n_steps: int) -> RiccatiSolution:
    from .riccati import solve_all
    return solve_all(sol.model, sol.grid, n_steps, sol.convention)
