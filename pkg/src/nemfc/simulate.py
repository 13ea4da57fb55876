"""Mean propagation and particle simulation (Euler-Maruyama).

Paths are stored as arrays indexed [time, label, particle, component].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, NonConvergenceError, ShapeError
from .grid import LabelGrid, kernel_apply
from .model import GenericModel, InitialCondition, LQModel
from .riccati import AffineFeedback, RiccatiSolution
from . import rng


@dataclass
class MeanPath:
    times: np.ndarray
    m: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


@dataclass
class EnsemblePath:
    times: np.ndarray
    X: np.ndarray
    dW: np.ndarray
    seed: int
    alpha: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.X.shape[2]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return self.times[1] - self.times[0]

    def empirical_means(self) -> np.ndarray:
        return self.X.mean(axis=2)


@dataclass
class VariationPath:
    times: np.ndarray
    V: np.ndarray


def time_grid(T: float, n_steps: int) -> np.ndarray:
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError("n_steps must be a positive integer")
    return np.linspace(0.0, T, int(n_steps) + 1)


def _feedback_action(grid: LabelGrid, coeffs, X, means) -> np.ndarray:
    offset, gain, cross = coeffs
    coupled = np.einsum("uvma,v,va->um", cross, grid.weights, means)
    return offset[:, None, :] + np.einsum("uma,upa->upm", gain, X) + coupled[:, None, :]


def propagate_means(model: LQModel, sol: RiccatiSolution, grid: LabelGrid, m0,
                    n_steps: int | None = None, feedback: AffineFeedback | None = None) -> MeanPath:
    """RK4 for the closed-loop mean ODE under an affine feedback law (optimal by default)."""
    if grid.n_labels != model.n_labels or sol.grid.n_labels != grid.n_labels:
        raise ValueError("grid, model and Riccati solution disagree on the labels")
    if abs(sol.T - model.T) > 1e-14:
        raise ValueError("Riccati solution and model have different horizons")
    m0 = np.asarray(m0, dtype=float)
    if m0.shape != model.beta.shape:
        raise ShapeError(f"initial means must have shape {model.beta.shape}")
    fb = feedback if feedback is not None else AffineFeedback(sol)
    n_steps = sol.n_steps if n_steps is None else n_steps
    times = time_grid(model.T, n_steps)
    h = times[1] - times[0]

    def rhs(t, m):
        offset, gain, cross = fb.coefficients(t)
        a = offset + np.einsum("uma,ua->um", gain, m) + kernel_apply(grid, cross, m)
        return (model.beta + np.einsum("uab,ub->ua", model.A, m)
                + kernel_apply(grid, model.G_A, m) + np.einsum("uam,um->ua", model.B, a))

    out = np.empty((times.size,) + m0.shape)
    out[0] = m0
    m = m0
    for k in range(n_steps):
        t = times[k]
        k1 = rhs(t, m)
        k2 = rhs(t + 0.5 * h, m + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, m + 0.5 * h * k2)
        k4 = rhs(t + h, m + h * k3)
        m = m + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(m)):
            raise BlowUpError("mean propagation produced non-finite values", times[k + 1])
        out[k + 1] = m
    return MeanPath(times, out)


def _initial_states(init, model_shape, n_particles, seed, default_mean):
    n, d = model_shape
    if init is None:
        return np.broadcast_to(default_mean[:, None, :], (n, n_particles, d)).copy()
    if isinstance(init, InitialCondition):
        X0 = init.sample(n_particles, seed)
    else:
        X0 = np.asarray(init, dtype=float)
    if X0.shape != (n, n_particles, d):
        raise ShapeError(f"initial states must have shape {(n, n_particles, d)}, got {X0.shape}")
    return X0


def simulate_closed_loop(model: LQModel, sol: RiccatiSolution, means: MeanPath, n_particles: int,
                         seed: int, init=None, feedback: AffineFeedback | None = None,
                         dW: np.ndarray | None = None) -> EnsemblePath:
    """Euler-Maruyama under an affine feedback, coupled through the given deterministic means.

    `init` is an InitialCondition or an array of initial states; by default
    every particle starts at the initial mean.
    """
    grid = sol.grid
    n, d, k = model.n_labels, model.d, model.n_noise
    times = means.times
    S = times.size - 1
    dt = times[1] - times[0]
    if means.m.shape != (S + 1, n, d):
        raise ShapeError("mean path does not match the model")
    fb = feedback if feedback is not None else AffineFeedback(sol)
    X = np.empty((S + 1, n, n_particles, d))
    X[0] = _initial_states(init, (n, d), n_particles, seed, means.m[0])
    if dW is None:
        dW = rng.brownian_increments(seed, S, n, n_particles, k, dt)
    alpha = np.empty((S + 1, n, n_particles, model.m))
    coupled_drift = np.einsum("tva,uvba,v->tub", means.m, model.G_A, grid.weights)
    for step in range(S + 1):
        a = _feedback_action(grid, fb.coefficients(times[step]), X[step], means.m[step])
        alpha[step] = a
        if step == S:
            break
        drift = (model.beta[:, None, :] + np.einsum("uab,upb->upa", model.A, X[step])
                 + coupled_drift[step][:, None, :] + np.einsum("uam,upm->upa", model.B, a))
        X[step + 1] = X[step] + drift * dt + np.einsum("uak,upk->upa", model.gamma, dW[step])
        if not np.all(np.isfinite(X[step + 1])):
            raise BlowUpError("particle simulation produced non-finite states", times[step + 1])
    return EnsemblePath(times, X, dW, seed, alpha)


# ----------------------------------------------------------------------------
# generic model


def _control_values(control, step, t, i, x, means):
    if callable(control):
        return np.asarray(control(step, t, i, x, means), dtype=float)
    return control[step, i]


def _sweep(model: GenericModel, control, X0, dW, times, mean_guess):
    """One forward pass; mean_guess=None means on-the-fly empirical means."""
    n, N, d = X0.shape
    S = times.size - 1
    dt = times[1] - times[0]
    X = np.empty((S + 1, n, N, d))
    alpha = np.empty((S + 1, n, N, model.m))
    X[0] = X0
    for step in range(S + 1):
        m_now = X[step].mean(axis=1) if mean_guess is None else mean_guess[step]
        for i in range(n):
            alpha[step, i] = _control_values(control, step, times[step], i, X[step, i], m_now)
        if step == S:
            break
        for i in range(n):
            drift = model.drift(i, X[step, i], m_now, alpha[step, i])
            vol = model.vol(i, X[step, i], m_now, alpha[step, i])
            if vol.ndim == 2:
                noise = dW[step, i] @ vol.T
            else:
                noise = np.einsum("pak,pk->pa", vol, dW[step, i])
            X[step + 1, i] = X[step, i] + drift * dt + noise
        if not np.all(np.isfinite(X[step + 1])):
            raise BlowUpError("particle simulation produced non-finite states", times[step + 1])
    return X, alpha


def simulate_open_loop(model: GenericModel, control, init, n_particles: int, n_steps: int,
                       seed: int, n_picard: int = 5, tol: float | None = None,
                       sequential: bool = False, dW: np.ndarray | None = None) -> EnsemblePath:
    """Particles driven by an admissible control, coupled through their empirical means.

    `control` is an array (n_steps + 1, n, N, m) of actions or a callable
    control(step, t, i, x, means) -> (N, m). The mean path is found by
    Picard iteration: simulate with frozen means, recompute empirical means,
    repeat. With `tol` the loop stops once the sup change is <= tol and
    raises NonConvergenceError if n_picard sweeps do not get there.
    `sequential=True` uses the current empirical means inside a single sweep,
    which is the fixed point the Picard loop converges to.
    """
    n, d, k = model.n_labels, model.d, model.n_noise
    times = time_grid(model.T, n_steps)
    dt = times[1] - times[0]
    if isinstance(init, InitialCondition):
        X0 = init.sample(n_particles, seed)
    else:
        X0 = np.asarray(init, dtype=float)
    if X0.shape != (n, n_particles, d):
        raise ShapeError(f"initial states must have shape {(n, n_particles, d)}")
    if dW is None:
        dW = rng.brownian_increments(seed, n_steps, n, n_particles, k, dt)
    if not callable(control):
        control = np.asarray(control, dtype=float)
        if control.shape[:3] != (n_steps + 1, n, n_particles):
            raise ShapeError("control array must have shape (n_steps + 1, n_labels, n_particles, m)")
    if sequential:
        X, alpha = _sweep(model, control, X0, dW, times, None)
        return EnsemblePath(times, X, dW, seed, alpha, {"picard_deltas": []})
    guess = np.broadcast_to(X0.mean(axis=1), (n_steps + 1, n, d)).copy()
    deltas = []
    for _ in range(max(1, n_picard)):
        X, alpha = _sweep(model, control, X0, dW, times, guess)
        new = X.mean(axis=2)
        deltas.append(float(np.abs(new - guess).max()))
        guess = new
        if tol is not None and deltas[-1] <= tol:
            break
    else:
        if tol is not None:
            raise NonConvergenceError(
                f"mean path did not settle within {n_picard} Picard sweeps",
                last=guess, residual=deltas[-1],
            )
    return EnsemblePath(times, X, dW, seed, alpha, {"picard_deltas": deltas})


def simulate_variation(model: GenericModel, base: EnsemblePath, direction,
                       base_control=None) -> VariationPath:
    """First-order response of the state to the control direction, same noise as `base`.

    The dynamics are linear, so `base_control` does not enter; it is accepted
    for symmetry with the nonlinear formulation.
    """
    direction = np.asarray(direction, dtype=float)
    S, n, N = base.n_steps, model.n_labels, base.n_particles
    if direction.shape[:3] != (S + 1, n, N) and direction.shape[:3] != (S, n, N):
        raise ValueError("direction does not match the base ensemble")
    if base.dW.shape[:3] != (S, n, N):
        raise ValueError("base ensemble noise does not match its time grid")
    dt = base.dt
    w = model.grid.weights
    V = np.zeros((S + 1, n, N, model.d))
    for step in range(S):
        Vbar = V[step].mean(axis=1)
        delta = direction[step]
        drift = (np.einsum("uab,upb->upa", model.b2, V[step])
                 + np.einsum("uvab,v,vb->ua", model.b1, w, Vbar)[:, None, :]
                 + np.einsum("uam,upm->upa", model.b3, delta))
        vol = (np.einsum("uakb,upb->upak", model.s2, V[step])
               + np.einsum("uvakb,v,vb->uak", model.s1, w, Vbar)[:, None]
               + np.einsum("uakm,upm->upak", model.s3, delta))
        V[step + 1] = V[step] + drift * dt + np.einsum("upak,upk->upa", vol, base.dW[step])
    return VariationPath(base.times, V)


def summary_rows(ens: EnsemblePath):
    """(t, label, mean..., variance...) per time and label."""
    mean = ens.X.mean(axis=2)
    var = ens.X.var(axis=2, ddof=1) if ens.n_particles > 1 else np.zeros_like(mean)
    rows = []
    for k, t in enumerate(ens.times):
        for i in range(mean.shape[1]):
            rows.append((t, i, *mean[k, i], *var[k, i]))
    return rows
