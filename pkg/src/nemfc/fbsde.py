"""Forward-backward system solver: least-squares Monte Carlo inside a continuation
method with Picard iteration.

The target system for a GenericModel is

    dX = [gamma b(X, mu, alpha) + I_b] dt + [gamma sigma(X, mu, alpha) + I_sigma] dW
    dY = -[gamma (d_x H + mean-field terms) + I_f] dt + Z dW
    X_0 = xi,  Y_T = gamma (d_x g + mean-field term) + I_g,
    alpha = argmin_a H(X, mu, Y, Z, a),

and gamma is moved from 0 to 1 in steps of eta, warm-starting each stage.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonConvergenceError, ShapeError
from .grid import LabelGrid
from .model import GenericModel, InitialCondition
from .simulate import time_grid
from . import rng


@dataclass
class FbsdeState:
    times: np.ndarray
    X: np.ndarray       # (S+1, n, N, d)
    Y: np.ndarray       # (S+1, n, N, d)
    Z: np.ndarray       # (S+1, n, N, d, k)
    alpha: np.ndarray   # (S+1, n, N, m)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        S1, n, N, d = self.X.shape
        if (self.Y.shape != self.X.shape or self.Z.shape[:4] != (S1, n, N, d)
                or self.alpha.shape[:3] != (S1, n, N) or self.times.shape != (S1,)):
            raise ShapeError("inconsistent FBSDE state shapes")

    @property
    def means(self) -> np.ndarray:
        return self.X.mean(axis=2)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


@dataclass
class InputBundle:
    b: np.ndarray       # (S+1, n, N, d)
    sigma: np.ndarray   # (S+1, n, N, d, k)
    f: np.ndarray       # (S+1, n, N, d)
    g: np.ndarray       # (n, N, d)

    @classmethod
    def zeros(cls, n_steps: int, n_labels: int, n_particles: int, d: int, k: int) -> "InputBundle":
        shape = (n_steps + 1, n_labels, n_particles)
        return cls(np.zeros(shape + (d,)), np.zeros(shape + (d, k)), np.zeros(shape + (d,)),
                   np.zeros((n_labels, n_particles, d)))

    def check(self, n_steps: int, n: int, N: int, d: int, k: int):
        shape = (n_steps + 1, n, N)
        if (self.b.shape != shape + (d,) or self.sigma.shape != shape + (d, k)
                or self.f.shape != shape + (d,) or self.g.shape != (n, N, d)):
            raise ShapeError("input bundle does not match the time grid and ensemble")
        for arr in (self.b, self.sigma, self.f, self.g):
            if not np.all(np.isfinite(arr)):
                raise ValueError("input bundle has non-finite entries")


@dataclass(frozen=True)
class ContinuationSchedule:
    eta: float = 0.2
    tol: float = 1e-6
    max_iter: int = 50
    degree: int = 1
    scheme: str = "markov"
    max_halvings: int = 3

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("eta must lie in (0, 1]")
        if self.tol <= 0 or self.max_iter < 1 or self.degree < 0:
            raise ValueError("invalid Picard settings")
        if self.scheme not in ("markov", "pathwise"):
            raise ValueError("scheme must be 'markov' or 'pathwise'")

    def gammas(self) -> list:
        steps = int(np.ceil(1.0 / self.eta - 1e-12))
        return [min(1.0, (j + 1) * self.eta) for j in range(steps)]


# ----------------------------------------------------------------------------
# norms


def snorm(grid: LabelGrid, theta: FbsdeState) -> float:
    """sqrt( int_I E[ sup|X|^2 + sup|Y|^2 + int (|Z|^2 + |alpha|^2) dt ] du ), discretized."""
    X, Y, Z, a = theta.X, theta.Y, theta.Z, theta.alpha
    if X.shape[1] != grid.n_labels:
        raise ShapeError("state and grid disagree on the labels")
    dt = (theta.times[-1] - theta.times[0]) / (theta.times.size - 1)
    sup_x = np.max(np.sum(X**2, axis=-1), axis=0)
    sup_y = np.max(np.sum(Y**2, axis=-1), axis=0)
    zz = np.sum(Z[:-1] ** 2, axis=(-2, -1)).sum(axis=0) * dt
    aa = np.sum(a[:-1] ** 2, axis=-1).sum(axis=0) * dt
    per_particle = sup_x + sup_y + zz + aa
    return float(np.sqrt(grid.weights @ per_particle.mean(axis=1)))


def snorm_diff(grid: LabelGrid, a: FbsdeState, b: FbsdeState) -> float:
    if a.X.shape != b.X.shape or a.Z.shape != b.Z.shape or a.alpha.shape != b.alpha.shape:
        raise ShapeError("states have different shapes")
    return snorm(grid, FbsdeState(a.times, a.X - b.X, a.Y - b.Y, a.Z - b.Z, a.alpha - b.alpha))


# ----------------------------------------------------------------------------
# regression


def _exponents(d: int, degree: int):
    out = []
    for r in range(degree + 1):
        out.extend(itertools.combinations_with_replacement(range(d), r))
    return out


@dataclass
class _Fit:
    """Per-label least-squares fits on a polynomial basis of the standardized state.

    Coefficient arrays are stacked over labels. Labels flagged `fallback`
    only use the constant basis function (their other coefficients are 0).
    """
    mu: np.ndarray            # (n, d)
    sd: np.ndarray            # (n, d)
    monomials: list
    fallback: np.ndarray      # (n,) bool
    cY: np.ndarray | None = None   # (n, p, d)
    cZ: np.ndarray | None = None   # (n, p, d, k)

    def basis(self, X) -> np.ndarray:
        xs = (X - self.mu[:, None, :]) / self.sd[:, None, :]
        cols = [np.prod(xs[..., list(e)], axis=-1) if e else np.ones(X.shape[:2])
                for e in self.monomials]
        return np.stack(cols, axis=-1)

    def y(self, X) -> np.ndarray:
        return self.basis(X) @ self.cY

    def z(self, X) -> np.ndarray:
        n, p = self.cZ.shape[:2]
        return (self.basis(X) @ self.cZ.reshape(n, p, -1)).reshape(X.shape[:2] + self.cZ.shape[2:])


def _lsq(design, target, cond_max: float = 1e10):
    """Batched least squares by normal equations on column-scaled designs.

    design (n, N, q), target (n, N, r). Returns coefficients (n, q, r) and a
    mask of labels whose scaled Gram matrix was well conditioned.
    """
    dT = np.swapaxes(design, 1, 2)
    gram = dT @ design
    scale = np.sqrt(np.diagonal(gram, axis1=1, axis2=2))
    ok = np.all(scale > 0, axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    gram = gram / (scale[:, :, None] * scale[:, None, :])
    eig = np.linalg.eigvalsh(gram)
    ok &= eig[:, 0] > eig[:, -1] / cond_max
    gram[~ok] = np.eye(gram.shape[1])
    rhs = (dT @ target) / scale[:, :, None]
    coef = np.linalg.solve(gram, rhs) / scale[:, :, None]
    coef[~ok] = 0.0
    return coef, ok


def _design(phi, dW):
    if dW is None:
        return phi
    return np.concatenate([phi] + [phi * dW[..., j:j + 1] for j in range(dW.shape[-1])], axis=-1)


def _fit(X, target, degree: int, dW=None):
    """Regress target (n, N, ...) on [phi(X), phi(X) dW_j] label by label.

    Returns the fit, E[target | X] and, when dW is given, Z with
    Z[..., j] = E[target dW_j | X] / dt.
    """
    n, N, d = X.shape
    tshape = target.shape[2:]
    flat = target.reshape(n, N, -1)
    mu = X.mean(axis=1)
    sd = X.std(axis=1)
    degenerate = np.any(sd <= 1e-12 * (1.0 + np.abs(mu)), axis=1) | (degree == 0)
    fit = _Fit(mu, np.where(sd > 0, sd, 1.0), _exponents(d, max(degree, 0)), degenerate.copy())
    phi = fit.basis(X)
    p = phi.shape[-1]
    coef, ok = _lsq(_design(phi, dW), flat)
    bad = ~ok | degenerate
    if np.any(bad):
        # sample-mean fallback: constant basis function only
        fit.fallback = bad
        const = _design(np.ones((n, N, 1)), dW)
        c2, ok2 = _lsq(const[bad], flat[bad])
        if not np.all(ok2):
            raise NonConvergenceError("regression failed even on the constant basis")
        full = np.zeros((int(bad.sum()),) + coef.shape[1:])
        full[:, ::p] = c2
        coef[bad] = full
    fit.cY = coef[:, :p].reshape((n, p) + tshape)
    yhat = (phi @ coef[:, :p]).reshape(target.shape)
    if dW is None:
        return fit, yhat, None
    k = dW.shape[-1]
    cZ = np.stack([coef[:, p * (j + 1):p * (j + 2)] for j in range(k)], axis=-1)
    fit.cZ = cZ.reshape((n, p) + tshape + (k,))
    z = (phi @ cZ.reshape(n, p, -1)).reshape((n, N) + tshape + (k,))
    return fit, yhat, z


def _refit(fit: _Fit, X, values) -> np.ndarray:
    """Coefficients of values (n, N, ...) on the basis already chosen by `fit`."""
    n, N = values.shape[:2]
    phi = fit.basis(X)
    phi = np.where(fit.fallback[:, None, None], np.eye(phi.shape[-1])[0], phi)
    coef, ok = _lsq(phi, values.reshape(n, N, -1))
    if not np.all(ok | fit.fallback):
        raise NonConvergenceError("regression basis became singular")
    if np.any(~ok):
        # fallback labels: the sample mean
        mean = values.reshape(n, N, -1).mean(axis=1)
        coef[~ok] = 0.0
        coef[~ok, 0] = mean[~ok]
    return coef.reshape((n, phi.shape[-1]) + values.shape[2:])


def _r_squared(target, fitted) -> float:
    resid = np.sum((target - fitted) ** 2)
    total = np.sum((target - target.mean(axis=1, keepdims=True)) ** 2)
    return 1.0 if total == 0 else float(1.0 - resid / total)


# ----------------------------------------------------------------------------
# decoupled system


def _noise(dW, sigma):
    return np.einsum("upak,upk->upa", sigma, dW)


def solve_decoupled(grid: LabelGrid, times, xi, inputs: InputBundle, seed: int, dW=None,
                    degree: int = 1) -> FbsdeState:
    """dX = I_b dt + I_sigma dW, dY = -I_f dt + Z dW, X_0 = xi, Y_T = I_g."""
    times = np.asarray(times, dtype=float)
    xi = np.asarray(xi, dtype=float)
    S = times.size - 1
    n, N, d = xi.shape
    k = inputs.sigma.shape[-1]
    inputs.check(S, n, N, d, k)
    if n != grid.n_labels:
        raise ShapeError("initial states and grid disagree on the labels")
    dt = times[1] - times[0]
    if dW is None:
        dW = rng.brownian_increments(seed, S, n, N, k, dt)
    X = np.empty((S + 1, n, N, d))
    X[0] = xi
    for s in range(S):
        X[s + 1] = X[s] + inputs.b[s] * dt + _noise(dW[s], inputs.sigma[s])
    Y = np.empty_like(X)
    Z = np.zeros((S + 1, n, N, d, k))
    Y[S] = inputs.g
    fallback_steps = []
    for s in range(S - 1, -1, -1):
        fit, Y[s], Z[s] = _fit(X[s], Y[s + 1] + inputs.f[s] * dt, degree, dW[s])
        if np.any(fit.fallback):
            fallback_steps.append(s)
    Z[S] = Z[S - 1]
    alpha = np.zeros((S + 1, n, N, 0))
    return FbsdeState(times, X, Y, Z, alpha,
                      {"fallback_steps": sorted(fallback_steps), "dW": dW})


# ----------------------------------------------------------------------------
# model terms


def _adjoint_driver(model: GenericModel, X, m, Y, Z, alpha) -> np.ndarray:
    """d_x H plus the mean-field terms, for all labels at one time. Shapes (n, N, ...)."""
    w = model.grid.weights
    hx = (np.einsum("uab,una->unb", model.b2, Y)
          + np.einsum("uakb,unak->unb", model.s2, Z)
          + model.dfdx_all(X, m, alpha))
    coupled = (np.einsum("vuab,v,va->ub", model.b1, w, Y.mean(axis=1))
               + np.einsum("vuakb,v,vak->ub", model.s1, w, Z.mean(axis=1)))
    return hx + coupled[:, None, :] + model.flat_f_term(X, alpha, m)


def _terminal(model: GenericModel, XT, mT) -> np.ndarray:
    out = np.stack([model.dgdx(i, XT[i], mT) for i in range(model.n_labels)])
    return out + model.flat_g_term(XT, mT)


def _backward(model: GenericModel, gamma: float, X, dW, times, inputs: InputBundle, degree: int,
              alpha_fixed=None, means=None):
    """Backward sweep on given forward paths; returns Y, Z, alpha and the decoupling fits.

    Y_s = E[Y_{s+1} + I_f dt | X_s] + gamma dt F(X_s, Yhat_s, Z_s, alpha_s), where
    the conditional expectation and Z_s come from one joint regression.
    """
    S1, n, N, d = X.shape
    S = S1 - 1
    k = model.n_noise
    dt = times[1] - times[0]
    m = X.mean(axis=2) if means is None else means
    Y = np.empty_like(X)
    Z = np.zeros((S + 1, n, N, d, k))
    alpha = np.empty((S + 1, n, N, model.m)) if alpha_fixed is None else alpha_fixed
    fits = [None] * (S + 1)
    Y[S] = gamma * _terminal(model, X[S], m[S]) + inputs.g
    fallback_steps = []
    r2_min = 1.0
    for s in range(S - 1, -1, -1):
        fit, Yhat, Z[s] = _fit(X[s], Y[s + 1] + inputs.f[s] * dt, degree, dW[s])
        if np.any(fit.fallback):
            fallback_steps.append(s)
        if alpha_fixed is None:
            alpha[s] = model.minimizer_all(X[s], m[s], Yhat, Z[s])
        Y[s] = Yhat
        if gamma != 0.0:
            Y[s] = Yhat + dt * gamma * _adjoint_driver(model, X[s], m[s], Yhat, Z[s], alpha[s])
        # the forward sweep reads Y_s as a function of X_s, on the basis used for Z_s
        fit.cY = _refit(fit, X[s], Y[s])
        r2_min = min(r2_min, _r_squared(Y[s], fit.y(X[s])))
        fits[s] = fit
    Z[S] = Z[S - 1]
    fit, _, _ = _fit(X[S], Y[S], degree)
    fit.cZ = _refit(fit, X[S], Z[S])
    fits[S] = fit
    if alpha_fixed is None:
        alpha[S] = model.minimizer_all(X[S], m[S], Y[S], Z[S])
    return Y, Z, alpha, fits, {"fallback_steps": sorted(fallback_steps), "min_r2": r2_min}


def _forward_markov(model: GenericModel, gamma: float, xi, dW, times, inputs: InputBundle, fits):
    """Forward Euler sweep with the control read off the previous decoupling field."""
    S = times.size - 1
    n, N, d = xi.shape
    dt = times[1] - times[0]
    X = np.empty((S + 1, n, N, d))
    X[0] = xi
    for s in range(S):
        b = inputs.b[s]
        sig = inputs.sigma[s]
        if gamma != 0.0:
            m = X[s].mean(axis=1)
            if fits is None:
                y = np.zeros_like(X[s])
                z = np.zeros((n, N, d, model.n_noise))
            else:
                y = fits[s].y(X[s])
                z = fits[s].z(X[s])
            a = model.minimizer_all(X[s], m, y, z)
            b = b + gamma * model.drift_all(X[s], m, a)
            sig = sig + gamma * model.vol_all(X[s], m, a)
        X[s + 1] = X[s] + b * dt + _noise(dW[s], sig)
        if not np.all(np.isfinite(X[s + 1])):
            raise NonConvergenceError("forward sweep produced non-finite states", residual=np.inf)
    return X


def _fits_from_state(state: FbsdeState, degree: int):
    fits = []
    for s in range(state.n_steps + 1):
        fit, _, _ = _fit(state.X[s], state.Y[s], degree)
        fit.cZ = _refit(fit, state.X[s], state.Z[s])
        fits.append(fit)
    return fits


def _picard_pathwise(model, gamma, xi, dW, times, inputs, prev: FbsdeState, degree):
    """Literal Picard map: every gamma-weighted term is evaluated on the previous iterate."""
    S = times.size - 1
    m_prev = prev.X.mean(axis=2)
    eff = InputBundle(inputs.b.copy(), inputs.sigma.copy(), inputs.f.copy(), inputs.g.copy())
    if gamma != 0.0:
        for s in range(S + 1):
            eff.b[s] += gamma * model.drift_all(prev.X[s], m_prev[s], prev.alpha[s])
            eff.sigma[s] += gamma * model.vol_all(prev.X[s], m_prev[s], prev.alpha[s])
            eff.f[s] += gamma * _adjoint_driver(model, prev.X[s], m_prev[s], prev.Y[s], prev.Z[s],
                                                prev.alpha[s])
        eff.g += gamma * _terminal(model, prev.X[S], m_prev[S])
    dec = solve_decoupled(model.grid, times, xi, eff, 0, dW, degree)
    m = dec.X.mean(axis=2)
    alpha = np.stack([model.minimizer_all(dec.X[s], m[s], dec.Y[s], dec.Z[s]) for s in range(S + 1)])
    return FbsdeState(times, dec.X, dec.Y, dec.Z, alpha,
                      {"fallback_steps": dec.info["fallback_steps"]})


def _zero_state(model: GenericModel, times, xi) -> FbsdeState:
    S = times.size - 1
    n, N, d = xi.shape
    X = np.broadcast_to(xi, (S + 1, n, N, d)).copy()
    return FbsdeState(times, X, np.zeros_like(X), np.zeros((S + 1, n, N, d, model.n_noise)),
                      np.zeros((S + 1, n, N, model.m)))


def solve_continuation_step(model: GenericModel, gamma: float, xi, inputs: InputBundle | None,
                            theta_init: FbsdeState | None, schedule: ContinuationSchedule,
                            seed: int, n_steps: int | None = None, dW=None) -> FbsdeState:
    """Picard iteration for the gamma-system until successive iterates differ by <= tol.

    gamma = 0 is a single decoupled pass. The iteration history (snorm of
    successive differences) is left in info["history"].
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    xi = np.asarray(xi, dtype=float)
    n, N, d = xi.shape
    k = model.n_noise
    if n != model.n_labels or d != model.d:
        raise ShapeError("initial states do not match the model")
    if n_steps is None:
        if theta_init is None:
            raise ValueError("n_steps is required without an initial iterate")
        n_steps = theta_init.n_steps
    times = time_grid(model.T, n_steps)
    dt = times[1] - times[0]
    inputs = InputBundle.zeros(n_steps, n, N, d, k) if inputs is None else inputs
    inputs.check(n_steps, n, N, d, k)
    if dW is None:
        dW = rng.brownian_increments(seed, n_steps, n, N, k, dt)
    prev = theta_init if theta_init is not None else _zero_state(model, times, xi)
    if prev.X.shape != (n_steps + 1, n, N, d):
        raise ShapeError("initial iterate does not match the time grid and ensemble")
    fits = prev.info.get("fits")
    if schedule.scheme == "markov" and fits is None and theta_init is not None:
        fits = _fits_from_state(theta_init, schedule.degree)
    history = []
    for _ in range(1 if gamma == 0.0 else schedule.max_iter):
        if schedule.scheme == "markov":
            X = _forward_markov(model, gamma, xi, dW, times, inputs, fits)
            Y, Z, alpha, fits, diag = _backward(model, gamma, X, dW, times, inputs, schedule.degree)
            state = FbsdeState(times, X, Y, Z, alpha, dict(diag))
            state.info["fits"] = fits
        else:
            state = _picard_pathwise(model, gamma, xi, dW, times, inputs, prev, schedule.degree)
        if not (np.all(np.isfinite(state.Y)) and np.all(np.isfinite(state.X))):
            raise NonConvergenceError(f"Picard iterate became non-finite at gamma={gamma}",
                                      last=prev, residual=np.inf)
        delta = snorm_diff(model.grid, state, prev)
        history.append(delta)
        prev = state
        if gamma == 0.0 or delta <= schedule.tol:
            break
    else:
        raise NonConvergenceError(
            f"Picard iteration at gamma={gamma:g} did not reach tol={schedule.tol:g} "
            f"in {schedule.max_iter} sweeps (last change {history[-1]:.3g}); try a smaller eta",
            last=prev, residual=history[-1],
        )
    prev.info.update({"history": history, "gamma": gamma, "dW": dW})
    return prev


def solve_full(model: GenericModel, xi, schedule: ContinuationSchedule | None, seed: int,
               n_steps: int, n_particles: int | None = None, dW=None) -> FbsdeState:
    """March gamma = eta, 2 eta, ..., 1 with warm starts; halve eta on failure."""
    schedule = ContinuationSchedule() if schedule is None else schedule
    if isinstance(xi, InitialCondition):
        if n_particles is None:
            raise ValueError("n_particles is required when xi is an InitialCondition")
        xi = xi.sample(n_particles, seed)
    xi = np.asarray(xi, dtype=float)
    n, N, d = xi.shape
    if dW is None:
        dW = rng.brownian_increments(seed, n_steps, n, N, model.n_noise, model.T / n_steps)
    current = solve_continuation_step(model, 0.0, xi, None, None, schedule, seed, n_steps, dW)
    done = 0.0
    eta = schedule.eta
    halvings = 0
    stages = []
    while done < 1.0 - 1e-12:
        target = min(1.0, round(done + eta, 12))
        try:
            current = solve_continuation_step(model, target, xi, None, current,
                                              replace(schedule, eta=eta), seed, n_steps, dW)
        except NonConvergenceError:
            if halvings >= schedule.max_halvings:
                raise
            halvings += 1
            eta /= 2.0
            continue
        stages.append({"gamma": target, "history": current.info["history"]})
        done = target
    current.info.update({"stages": stages, "eta": eta, "halvings": halvings})
    return current


def adjoint_bsde(model: GenericModel, X, alpha, dW, times, means=None, degree: int = 1) -> FbsdeState:
    """Adjoint pair for a fixed control along given state paths (no minimization)."""
    X = np.asarray(X, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    S1, n, N, d = X.shape
    inputs = InputBundle.zeros(S1 - 1, n, N, d, model.n_noise)
    Y, Z, alpha, _, diag = _backward(model, 1.0, X, dW, np.asarray(times), inputs, degree,
                                     alpha_fixed=alpha, means=means)
    return FbsdeState(np.asarray(times), X, Y, Z, alpha, diag)


def summary_rows(state: FbsdeState):
    """(t, label, mean X..., mean Y..., mean |Z|) per time and label."""
    mx = state.X.mean(axis=2)
    my = state.Y.mean(axis=2)
    mz = np.sqrt(np.sum(state.Z**2, axis=(-2, -1))).mean(axis=2)
    rows = []
    for s, t in enumerate(state.times):
        for i in range(mx.shape[1]):
            rows.append((t, i, *mx[s, i], *my[s, i], mz[s, i]))
    return rows
