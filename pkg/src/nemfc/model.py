"""Problem data: the heterogeneous LQ model and the generic linear-dynamics model.

Array layout used throughout the package (n = number of labels):

    per-label vector      (n, d)
    per-label matrix      (n, p, q)
    kernel                (n, n, p, q)   entry [i, j] is G(u_i, u_j)

The measure argument of the cost oracles is represented by the per-label
mean field `means` of shape (n, d).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError
from .grid import LabelGrid, kernel_apply, make_uniform_grid
from . import rng


def _field(value, n: int, shape: tuple, name: str) -> np.ndarray:
    """Broadcast a constant, a single block or a per-label table to (n, *shape).

    A scalar stands for a multiple of the identity when the block is a matrix.
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if len(shape) == 2:
            block = arr * np.eye(*shape)
        else:
            block = np.full(shape, float(arr))
        return np.broadcast_to(block, (n, *shape)).copy()
    if arr.shape == shape:
        return np.broadcast_to(arr, (n, *shape)).copy()
    if arr.shape == (n, *shape):
        return arr.copy()
    if len(shape) == 2 and shape[0] == shape[1] == 1 and arr.shape == (n,):
        return arr.reshape(n, 1, 1).copy()
    if len(shape) == 1 and shape[0] == 1 and arr.shape == (n,):
        return arr.reshape(n, 1).copy()
    raise ShapeError(f"{name}: cannot interpret shape {arr.shape} as per-label {shape}")


def _kernel(value, n: int, shape: tuple, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        block = arr * np.eye(*shape)
        return np.broadcast_to(block, (n, n, *shape)).copy()
    if arr.shape == shape:
        return np.broadcast_to(arr, (n, n, *shape)).copy()
    if arr.shape == (n, n, *shape):
        return arr.copy()
    if shape == (1, 1) and arr.shape == (n, n):
        return arr.reshape(n, n, 1, 1).copy()
    raise ShapeError(f"{name}: cannot interpret shape {arr.shape} as a kernel of {shape} blocks")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LQModel:
    """Coefficients of the heterogeneous linear-quadratic problem.

    State drift   beta + A x + int G_A(u,v) m^v dv + B a,  volatility gamma.
    Running cost  (x - int Gt_Q m)' Q (x - int Gt_Q m) + a' R a + 2 a' Gamma x
                  + 2 a' int G_I m.
    Terminal cost (x - int Gt_P m)' P (x - int Gt_P m).
    """

    beta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    gamma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Gamma: np.ndarray
    P: np.ndarray
    G_A: np.ndarray
    Gt_Q: np.ndarray
    Gt_P: np.ndarray
    G_I: np.ndarray
    T: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 2:
            raise ShapeError("beta must have shape (n_labels, d)")
        n, d = beta.shape
        B = np.asarray(self.B, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if B.ndim != 3 or gamma.ndim != 3:
            raise ShapeError("B and gamma must be per-label matrices")
        m, k = B.shape[2], gamma.shape[2]
        expected = {
            "beta": (n, d), "A": (n, d, d), "B": (n, d, m), "gamma": (n, d, k),
            "Q": (n, d, d), "R": (n, m, m), "Gamma": (n, m, d), "P": (n, d, d),
            "G_A": (n, n, d, d), "Gt_Q": (n, n, d, d), "Gt_P": (n, n, d, d),
            "G_I": (n, n, m, d),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, _frozen(arr.copy()))
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def build(cls, n_labels: int, d: int = 1, m: int = 1, n_noise: int = 1, T: float = 1.0,
              **values) -> "LQModel":
        """Assemble a model from constants, blocks or per-label tables; missing data is zero."""
        n = n_labels
        shapes = {
            "beta": (d,), "A": (d, d), "B": (d, m), "gamma": (d, n_noise),
            "Q": (d, d), "R": (m, m), "Gamma": (m, d), "P": (d, d),
        }
        kernels = {"G_A": (d, d), "Gt_Q": (d, d), "Gt_P": (d, d), "G_I": (m, d)}
        unknown = set(values) - set(shapes) - set(kernels)
        if unknown:
            raise TypeError(f"unknown model fields: {sorted(unknown)}")
        data = {}
        for name, shape in shapes.items():
            data[name] = _field(values.get(name, 0.0), n, shape, name)
        for name, shape in kernels.items():
            data[name] = _kernel(values.get(name, 0.0), n, shape, name)
        return cls(T=T, **data)

    @property
    def n_labels(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.beta.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def n_noise(self) -> int:
        return self.gamma.shape[2]

    def R_inv(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    def replace(self, **changes) -> "LQModel":
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data.update(changes)
        return LQModel(**data)

    def permuted(self, perm) -> "LQModel":
        """Same model with labels reordered by `perm`."""
        perm = np.asarray(perm)
        out = {}
        for name in ("beta", "A", "B", "gamma", "Q", "R", "Gamma", "P"):
            out[name] = getattr(self, name)[perm]
        for name in ("G_A", "Gt_Q", "Gt_P", "G_I"):
            out[name] = getattr(self, name)[np.ix_(perm, perm)]
        return LQModel(T=self.T, **out)


@dataclass(frozen=True)
class InitialCondition:
    """Per-label law of the initial state.

    kind is "constant", "gaussian" or "custom". A custom sampler is called as
    sampler(label_index, particle_indices, seed) and must return (N, d) draws
    that depend only on its arguments.
    """

    kind: str
    mean: np.ndarray
    cov: np.ndarray | None = None
    sampler: Callable | None = None

    @classmethod
    def constant(cls, values) -> "InitialCondition":
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ShapeError("constant initial condition needs shape (n_labels, d)")
        return cls("constant", values)

    @classmethod
    def gaussian(cls, mean, cov) -> "InitialCondition":
        mean = np.asarray(mean, dtype=float)
        if mean.ndim != 2:
            raise ShapeError("mean needs shape (n_labels, d)")
        cov = _field(cov, mean.shape[0], (mean.shape[1],) * 2, "cov")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("initial condition parameters must be finite")
        return cls("gaussian", mean, cov)

    @classmethod
    def custom(cls, sampler: Callable, mean) -> "InitialCondition":
        return cls("custom", np.asarray(mean, dtype=float), sampler=sampler)

    @property
    def n_labels(self) -> int:
        return self.mean.shape[0]

    @property
    def d(self) -> int:
        return self.mean.shape[1]

    def sample(self, n_particles: int, seed: int) -> np.ndarray:
        """Draws of shape (n_labels, n_particles, d)."""
        n, d = self.mean.shape
        if self.kind == "constant":
            return np.broadcast_to(self.mean[:, None, :], (n, n_particles, d)).copy()
        particles = np.arange(n_particles)
        if self.kind == "gaussian":
            z = rng.normals(seed, rng.INITIAL, 0, np.arange(n), particles, d)
            chol = np.stack([_psd_factor(c) for c in self.cov])
            return self.mean[:, None, :] + np.einsum("iab,ipb->ipa", chol, z)
        out = np.stack([np.asarray(self.sampler(i, particles, seed), dtype=float) for i in range(n)])
        if out.shape != (n, n_particles, d):
            raise ShapeError(f"custom sampler returned shape {out.shape}")
        return out


def _psd_factor(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (c + c.T))
    if vals.min() < -1e-12:
        raise ValueError("covariance must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class ValidationReport:
    passed: bool
    lambda_candidate: float
    violations: list = field(default_factory=list)
    structural_ok: bool = True
    convexity_gap_min: float = 0.0

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "structural_ok": self.structural_ok,
            "lambda_candidate": self.lambda_candidate,
            "convexity_gap_min": self.convexity_gap_min,
            "violations": list(self.violations),
        }


def validate_lq(model: LQModel, grid: LabelGrid | None = None, n_samples: int = 256,
                seed: int = 0) -> ValidationReport:
    """Check the standing structural assumptions and sample the convexity inequality.

    `structural_ok` covers symmetry and definiteness; `passed` additionally
    requires the sampled strong-convexity slack to be nonnegative.
    """
    if not isinstance(model, LQModel):
        raise TypeError("validate_lq expects an LQModel")
    n = model.n_labels
    grid = grid if grid is not None else make_uniform_grid(n)
    if grid.n_labels != n:
        raise ShapeError("grid and model disagree on the number of labels")
    violations = []
    for name in ("Q", "P"):
        mats = getattr(model, name)
        for i in range(n):
            if not np.allclose(mats[i], mats[i].T, rtol=0.0, atol=1e-12):
                violations.append(f"{name} not symmetric at label {i}")
                continue
            lo = np.linalg.eigvalsh(mats[i]).min()
            if lo < -1e-10:
                violations.append(f"{name} not positive semidefinite at label {i} (min eigenvalue {lo:.6g})")
    lam = np.inf
    for i in range(n):
        R = model.R[i]
        if not np.allclose(R, R.T, rtol=0.0, atol=1e-12):
            violations.append(f"R not symmetric at label {i}")
            continue
        lo = np.linalg.eigvalsh(R).min()
        lam = min(lam, lo)
        if lo <= 0.0:
            violations.append(f"R not positive definite at label {i} (min eigenvalue {lo:.6g})")
    for name in ("Gt_Q", "Gt_P"):
        G = getattr(model, name)
        bad = np.argwhere(np.any(G != np.swapaxes(G, 0, 1).swapaxes(2, 3), axis=(2, 3)))
        for i, j in bad:
            if i < j:
                violations.append(f"{name} breaks pair-transpose symmetry at labels ({i}, {j})")
    for name in ("beta", "A", "B", "gamma", "Gamma", "G_A", "G_I"):
        if not np.all(np.isfinite(getattr(model, name))):
            violations.append(f"{name} has non-finite entries")
    structural_ok = not violations
    gap = 0.0
    if structural_ok:
        from .verify import check_lambda_convexity
        report = check_lambda_convexity(lq_as_generic(model, grid), n_samples, seed)
        gap = report["min_slack_f"]
        if min(report["min_slack_f"], report["min_slack_g"]) < -1e-9:
            violations.append(
                f"strong convexity secant test failed at label {report['worst_label']} "
                f"(slack {min(report['min_slack_f'], report['min_slack_g']):.6g})"
            )
    return ValidationReport(
        passed=not violations,
        lambda_candidate=float(lam),
        violations=violations,
        structural_ok=structural_ok,
        convexity_gap_min=float(gap),
    )


# ----------------------------------------------------------------------------
# generic model


def _zero(*shape):
    return np.zeros(shape)


@dataclass(frozen=True)
class GenericModel:
    """Linear dynamics with convex cost oracles on a label grid.

    b(u, x, m, a)     = b0 + int b1(u,v) m^v dv + b2 x + b3 a             (d,)
    sigma(u, x, m, a) = s0 + int s1(u,v) m^v dv + s2 x + s3 a             (d, k)

    with s1 of shape (n, n, d, k, d), s2 of shape (n, d, k, d) and s3 of
    shape (n, d, k, m). Cost oracles take a label index, batched states
    x (..., d), the mean field (n, d) and batched actions a (..., m):

    f(i, x, means, a) -> (...)
    dfdx, dfda        -> (..., d), (..., m)
    g(i, x, means)    -> (...);  dgdx -> (..., d)
    dflat_f(i, x, means, a, j, xt) -> (..., d)   x-gradient of the flat
        derivative of f at label u_i, evaluated at (u_j, xt)
    dflat_g(i, x, means, j, xt)    -> (..., d)
    """

    grid: LabelGrid
    T: float
    b0: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    f: Callable
    dfdx: Callable
    dfda: Callable
    g: Callable
    dgdx: Callable
    dflat_f: Callable
    dflat_g: Callable
    lam: float
    flat_samples: int = 64

    def __post_init__(self):
        n = self.grid.n_labels
        b0 = np.asarray(self.b0, dtype=float)
        s0 = np.asarray(self.s0, dtype=float)
        b3 = np.asarray(self.b3, dtype=float)
        if b0.shape[:1] != (n,) or b0.ndim != 2:
            raise ShapeError("b0 must have shape (n_labels, d)")
        d = b0.shape[1]
        k = s0.shape[2]
        m = b3.shape[2]
        expected = {
            "b0": (n, d), "b1": (n, n, d, d), "b2": (n, d, d), "b3": (n, d, m),
            "s0": (n, d, k), "s1": (n, n, d, k, d), "s2": (n, d, k, d), "s3": (n, d, k, m),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, _frozen(arr.copy()))
        if not self.lam > 0:
            raise ValueError("strong convexity constant must be positive")

    @property
    def n_labels(self) -> int:
        return self.grid.n_labels

    @property
    def d(self) -> int:
        return self.b0.shape[1]

    @property
    def m(self) -> int:
        return self.b3.shape[2]

    @property
    def n_noise(self) -> int:
        return self.s0.shape[2]

    # dynamics -----------------------------------------------------------

    def drift(self, i: int, x, means, a) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        coupled = kernel_apply(self.grid, self.b1, means)[i]
        return self.b0[i] + coupled + x @ self.b2[i].T + a @ self.b3[i].T

    def vol(self, i: int, x, means, a) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        coupled = np.einsum("jakb,j,jb->ak", self.s1[i], self.grid.weights, means)
        return (self.s0[i] + coupled
                + np.einsum("akb,...b->...ak", self.s2[i], x)
                + np.einsum("akc,...c->...ak", self.s3[i], a))

    def drift_all(self, X, means, alpha) -> np.ndarray:
        """Drift for every label at once: X (n, N, d), alpha (n, N, m) -> (n, N, d)."""
        coupled = kernel_apply(self.grid, self.b1, means)
        return (self.b0[:, None, :] + coupled[:, None, :]
                + np.einsum("uab,unb->una", self.b2, X) + np.einsum("uam,unm->una", self.b3, alpha))

    def vol_all(self, X, means, alpha) -> np.ndarray:
        coupled = np.einsum("uvakb,v,vb->uak", self.s1, self.grid.weights, means)
        return ((self.s0 + coupled)[:, None]
                + np.einsum("uakb,unb->unak", self.s2, X) + np.einsum("uakm,unm->unak", self.s3, alpha))

    def dfdx_all(self, X, means, alpha) -> np.ndarray:
        return np.stack([self.dfdx(i, X[i], means, alpha[i]) for i in range(self.n_labels)])

    def minimizer_all(self, X, means, Y, Z) -> np.ndarray:
        return np.stack([self.minimizer(i, X[i], means, Y[i], Z[i]) for i in range(self.n_labels)])

    def has_state_vol(self) -> bool:
        return bool(np.any(self.s1) or np.any(self.s2) or np.any(self.s3))

    # couplings in the adjoint equation ---------------------------------

    def flat_f_term(self, X, alpha, means) -> np.ndarray:
        """int E~[ d(delta f/delta m)(v, X~^v, mu, alpha~^v)(u, x) ] dv for every particle x.

        X, alpha have shapes (n, N, d) and (n, N, m); returns (n, N, d).
        The expectation over the tilde copy uses up to `flat_samples`
        evenly spaced particles.
        """
        n, N, d = X.shape
        sub = _subsample(N, self.flat_samples)
        out = np.zeros_like(X)
        for v in range(n):
            xv = X[v, sub][:, None, :]
            av = alpha[v, sub][:, None, :]
            for u in range(n):
                vals = self.dflat_f(v, xv, means, av, u, X[u][None, :, :])
                out[u] += self.grid.weights[v] * vals.mean(axis=0)
        return out

    def flat_g_term(self, X, means) -> np.ndarray:
        n, N, d = X.shape
        sub = _subsample(N, self.flat_samples)
        out = np.zeros_like(X)
        for v in range(n):
            xv = X[v, sub][:, None, :]
            for u in range(n):
                vals = self.dflat_g(v, xv, means, u, X[u][None, :, :])
                out[u] += self.grid.weights[v] * vals.mean(axis=0)
        return out

    def minimizer(self, i: int, x, means, y, z, tol: float = 1e-10) -> np.ndarray:
        from .hamiltonian import minimize_H_generic
        return minimize_H_generic(self, i, x, means, y, z, tol=tol)


def _subsample(N: int, k: int) -> np.ndarray:
    if N <= k:
        return np.arange(N)
    return np.linspace(0, N - 1, k).round().astype(int)


class LQGenericModel(GenericModel):
    """Generic view of an LQModel; keeps the closed forms for the minimizer and couplings."""

    lq: LQModel

    def flat_f_term(self, X, alpha, means) -> np.ndarray:
        # affine in the tilde particle, so the tilde expectation only needs its mean
        lq = self.lq
        w = self.grid.weights
        c = kernel_apply(self.grid, lq.Gt_Q, means)
        dev = X.mean(axis=1) - c
        qdev = np.einsum("vab,vb->va", lq.Q, dev)
        abar = alpha.mean(axis=1)
        term = (-2.0 * np.einsum("vuab,v,va->ub", lq.Gt_Q, w, qdev)
                + 2.0 * np.einsum("vuab,v,va->ub", lq.G_I, w, abar))
        return np.broadcast_to(term[:, None, :], X.shape).copy()

    def flat_g_term(self, X, means) -> np.ndarray:
        lq = self.lq
        w = self.grid.weights
        e = kernel_apply(self.grid, lq.Gt_P, means)
        pdev = np.einsum("vab,vb->va", lq.P, X.mean(axis=1) - e)
        term = -2.0 * np.einsum("vuab,v,va->ub", lq.Gt_P, w, pdev)
        return np.broadcast_to(term[:, None, :], X.shape).copy()

    def dfdx_all(self, X, means, alpha) -> np.ndarray:
        lq = self.lq
        c = kernel_apply(self.grid, lq.Gt_Q, means)
        return (2.0 * np.einsum("uab,unb->una", lq.Q, X - c[:, None, :])
                + 2.0 * np.einsum("uma,unm->una", lq.Gamma, alpha))

    def minimizer_all(self, X, means, Y, Z) -> np.ndarray:
        lq = self.lq
        shift = kernel_apply(self.grid, lq.G_I, means)
        rhs = (np.einsum("uam,una->unm", lq.B, Y) + 2.0 * np.einsum("uma,una->unm", lq.Gamma, X)
               + 2.0 * shift[:, None, :])
        return -0.5 * np.einsum("umk,unk->unm", self._R_inv, rhs)

    def minimizer(self, i: int, x, means, y, z, tol: float = 0.0) -> np.ndarray:
        from .hamiltonian import minimize_H_lq
        return minimize_H_lq(self.lq, self.grid, i, x, means, y, z)


def lq_as_generic(model: LQModel, grid: LabelGrid | None = None) -> LQGenericModel:
    """Generic oracle view of an LQ model with exact derivatives and flat derivatives."""
    n, d, m, k = model.n_labels, model.d, model.m, model.n_noise
    grid = grid if grid is not None else make_uniform_grid(n)
    if grid.n_labels != n:
        raise ShapeError("grid and model disagree on the number of labels")
    Q, R, Gam, P = model.Q, model.R, model.Gamma, model.P

    def target_q(i, means):
        return np.einsum("jab,j,jb->a", model.Gt_Q[i], grid.weights, means)

    def target_p(i, means):
        return np.einsum("jab,j,jb->a", model.Gt_P[i], grid.weights, means)

    def action_shift(i, means):
        return np.einsum("jab,j,jb->a", model.G_I[i], grid.weights, means)

    def f(i, x, means, a):
        dev = np.asarray(x, dtype=float) - target_q(i, means)
        a = np.asarray(a, dtype=float)
        return (np.einsum("...a,ab,...b->...", dev, Q[i], dev)
                + np.einsum("...a,ab,...b->...", a, R[i], a)
                + 2.0 * np.einsum("...a,ab,...b->...", a, Gam[i], x)
                + 2.0 * a @ action_shift(i, means))

    def dfdx(i, x, means, a):
        dev = np.asarray(x, dtype=float) - target_q(i, means)
        return 2.0 * dev @ Q[i].T + 2.0 * np.asarray(a, dtype=float) @ Gam[i]

    def dfda(i, x, means, a):
        return (2.0 * np.asarray(a, dtype=float) @ R[i].T + 2.0 * np.asarray(x, dtype=float) @ Gam[i].T
                + 2.0 * action_shift(i, means))

    def g(i, x, means):
        dev = np.asarray(x, dtype=float) - target_p(i, means)
        return np.einsum("...a,ab,...b->...", dev, P[i], dev)

    def dgdx(i, x, means):
        return 2.0 * (np.asarray(x, dtype=float) - target_p(i, means)) @ P[i].T

    def dflat_f(i, x, means, a, j, xt):
        dev = np.asarray(x, dtype=float) - target_q(i, means)
        val = (-2.0 * (dev @ Q[i].T) @ model.Gt_Q[i, j]
               + 2.0 * np.asarray(a, dtype=float) @ model.G_I[i, j])
        return np.broadcast_to(val, np.broadcast_shapes(val.shape, np.shape(xt))).copy()

    def dflat_g(i, x, means, j, xt):
        dev = np.asarray(x, dtype=float) - target_p(i, means)
        val = -2.0 * (dev @ P[i].T) @ model.Gt_P[i, j]
        return np.broadcast_to(val, np.broadcast_shapes(val.shape, np.shape(xt))).copy()

    lam = float(min(np.linalg.eigvalsh(r).min() for r in model.R))
    if lam <= 0:
        raise ValueError("R must be positive definite at every label")
    gm = LQGenericModel(
        grid=grid, T=model.T,
        b0=model.beta, b1=model.G_A, b2=model.A, b3=model.B,
        s0=model.gamma, s1=_zero(n, n, d, k, d), s2=_zero(n, d, k, d), s3=_zero(n, d, k, m),
        f=f, dfdx=dfdx, dfda=dfda, g=g, dgdx=dgdx, dflat_f=dflat_f, dflat_g=dflat_g,
        lam=lam,
    )
    object.__setattr__(gm, "lq", model)
    object.__setattr__(gm, "_R_inv", np.linalg.inv(model.R))
    return gm
