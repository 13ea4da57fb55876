"""Hamiltonian H = b.y + sigma:z + f, its gradients and its minimizer in the action.

All functions accept batched points: x, y, a with shapes (..., d), (..., d),
(..., m) and z with shape (..., d, k).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergenceError, ShapeError
from .grid import LabelGrid, kernel_apply
from .model import GenericModel, LQModel


@dataclass(frozen=True)
class HamiltonianPoint:
    label: int
    x: np.ndarray
    means: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a: np.ndarray


def _check(model: GenericModel, p: HamiltonianPoint):
    d, m, k = model.d, model.m, model.n_noise
    if (np.shape(p.x)[-1:] != (d,) or np.shape(p.y)[-1:] != (d,)
            or np.shape(p.a)[-1:] != (m,) or np.shape(p.z)[-2:] != (d, k)
            or np.shape(p.means) != (model.n_labels, d)):
        raise ShapeError("Hamiltonian point does not match the model dimensions")


def eval_H(model: GenericModel, p: HamiltonianPoint) -> np.ndarray:
    _check(model, p)
    i = p.label
    b = model.drift(i, p.x, p.means, p.a)
    s = model.vol(i, p.x, p.means, p.a)
    return (np.einsum("...a,...a->...", b, p.y)
            + np.einsum("...ak,...ak->...", s, p.z)
            + model.f(i, p.x, p.means, p.a))


def grad_H(model: GenericModel, p: HamiltonianPoint) -> tuple[np.ndarray, np.ndarray]:
    """(dH/dx, dH/da) at the point, the measure argument held fixed."""
    _check(model, p)
    i = p.label
    y = np.asarray(p.y, dtype=float)
    z = np.asarray(p.z, dtype=float)
    hx = y @ model.b2[i] + np.einsum("akb,...ak->...b", model.s2[i], z) + model.dfdx(i, p.x, p.means, p.a)
    ha = y @ model.b3[i] + np.einsum("akc,...ak->...c", model.s3[i], z) + model.dfda(i, p.x, p.means, p.a)
    return hx, ha


def minimize_H_lq(model: LQModel, grid: LabelGrid, i: int, x, means, y, z=None) -> np.ndarray:
    """Closed-form minimizer -1/2 R^{-1} [B'y + 2 Gamma x + 2 int G_I m]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shift = kernel_apply(grid, model.G_I, means)[i]
    rhs = y @ model.B[i] + 2.0 * x @ model.Gamma[i].T + 2.0 * shift
    return -0.5 * rhs @ np.linalg.inv(model.R[i]).T


def minimize_H_generic(model: GenericModel, i: int, x, means, y, z, tol: float = 1e-10,
                       a0=None, max_iter: int = 10_000) -> np.ndarray:
    """Gradient descent with backtracking on a -> H(u_i, x, means, y, z, a).

    Each batch entry carries its own step size. Raises NonConvergenceError
    with the last iterate when the cap is reached.
    """
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    a = np.zeros(batch + (model.m,)) if a0 is None else np.array(a0, dtype=float)

    def H(a):
        return eval_H(model, HamiltonianPoint(i, x, means, y, z, a))

    def grad(a):
        return grad_H(model, HamiltonianPoint(i, x, means, y, z, a))[1]

    step = np.ones(batch)
    h = H(a)
    g = grad(a)
    gnorm = np.linalg.norm(g, axis=-1)
    for it in range(max_iter + 1):
        active = gnorm > tol
        if not np.any(active):
            return a
        if it == max_iter:
            break
        trial = a - step[..., None] * g
        h_trial = H(trial)
        g_trial = grad(trial)
        gnorm_trial = np.linalg.norm(g_trial, axis=-1)
        # once the Armijo decrease is below rounding in H, accept steps that do not
        # pass the minimum along -g (the slope at the trial point is still downhill)
        noise = 1e-12 * (1.0 + np.abs(h))
        decrease = 0.5 * step * gnorm**2
        downhill = np.sum(g_trial * g, axis=-1) >= 0.0
        ok = np.where(decrease > noise, h_trial <= h - decrease, downhill)
        ok &= active
        a = np.where(ok[..., None], trial, a)
        h = np.where(ok, h_trial, h)
        g = np.where(ok[..., None], g_trial, g)
        gnorm = np.where(ok, gnorm_trial, gnorm)
        step = np.where(ok, step * 2.0, np.where(active, step * 0.5, step))
        step = np.maximum(step, 1e-300)
    raise NonConvergenceError(
        f"minimizer did not reach |grad| <= {tol} in {max_iter} iterations",
        last=a, residual=float(gnorm.max()),
    )


def minimizer_bound(model: GenericModel, i: int, x, means, y, z, beta0=None) -> np.ndarray:
    """(1/lam)(|d_a f(beta0)| + |b3||y| + |s3||z|) + |beta0| with spectral norms."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    batch = x.shape[:-1]
    beta0 = np.zeros(batch + (model.m,)) if beta0 is None else np.asarray(beta0, dtype=float)
    b3_norm = np.linalg.norm(model.b3[i], 2)
    s3_norm = np.linalg.norm(model.s3[i].reshape(-1, model.m), 2)
    grad0 = np.linalg.norm(model.dfda(i, x, means, beta0), axis=-1)
    y_norm = np.linalg.norm(y, axis=-1)
    z_norm = np.sqrt(np.einsum("...ak,...ak->...", z, z))
    return (grad0 + b3_norm * y_norm + s3_norm * z_norm) / model.lam + np.linalg.norm(beta0, axis=-1)
