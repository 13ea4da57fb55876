"""Triangular Riccati system for the heterogeneous LQ problem.

The adjoint ansatz Y = 2(K x + int Kbar(u,v) m^v dv + Lambda) leads to three
backward equations solved in order:

    K'    + A'K + KA + Q - M' R^{-1} M = 0,                      K(T) = P
    Kbar' + Psi - M_u' R_u^{-1} V1(u,v) - V2(v,u)' R_v^{-1} M_v
          - int V2(w,u)' R_w^{-1} V1(w,v) dw = 0,                Kbar(T) = G_P
    Lambda' + K beta + int Kbar(u,v) beta^v dv + A'Lambda - M' R^{-1} B'Lambda
          + int G_A(v,u)' Lambda^v dv
          - int V2(v,u)' R_v^{-1} B_v' Lambda^v dv = 0,           Lambda(T) = 0

with M = B'K + Gamma, V1(u,v) = B_u' Kbar(u,v) + G_I(u,v) and
V2(u,v) = B_u' Kbar(v,u)' + G_I(u,v).

Sign convention for Lambda. Matching the constant terms of the ansatz
against the adjoint equation gives the A'Lambda term and a minus sign on the
V2 integral, as written above ("derived", the default). The alternative
"printed" convention drops A'Lambda and puts a plus sign on the V2 integral.
Only the derived form makes the adjoint residual converge at first order and
makes the FBSDE solver reproduce the ansatz; the printed form is kept for
that comparison.

The cross-label cost kernels enter through
    G_Q(u,v) = int Gt_Q(u,w) Q^w Gt_Q(w,v) dw - Q^u Gt_Q(u,v) - Gt_Q(u,v) Q^v
and the same expression with (Gt_P, P) for G_P.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError, ShapeError
from .grid import LabelGrid
from .model import LQModel

CONVENTIONS = ("derived", "printed")


_PATHS: dict = {}


def _es(subscripts, *ops):
    # contraction paths are planned once per (subscripts, shapes) and reused
    key = (subscripts,) + tuple(op.shape for op in ops)
    path = _PATHS.get(key)
    if path is None:
        path = np.einsum_path(subscripts, *ops, optimize="greedy")[0]
        _PATHS[key] = path
    return np.einsum(subscripts, *ops, optimize=path)


@dataclass(frozen=True)
class DerivedCoefficients:
    C_Y: np.ndarray
    C_X: np.ndarray
    Phi_X: np.ndarray
    Phi_Y: np.ndarray
    G_Q: np.ndarray
    G_P: np.ndarray


def _cost_kernel(grid: LabelGrid, Gt: np.ndarray, W: np.ndarray) -> np.ndarray:
    w = grid.weights
    return (_es("uwab,w,wbc,wvcd->uvad", Gt, w, W, Gt)
            - _es("uab,uvbc->uvac", W, Gt)
            - _es("uvab,vbc->uvac", Gt, W))


def _check_grid(model: LQModel, grid: LabelGrid):
    if grid.n_labels != model.n_labels:
        raise ShapeError(f"grid has {grid.n_labels} labels, model has {model.n_labels}")


def derived_coefficients(model: LQModel, grid: LabelGrid) -> DerivedCoefficients:
    _check_grid(model, grid)
    w = grid.weights
    Rinv = np.linalg.inv(model.R)
    A, B, Gam, G_I = model.A, model.B, model.Gamma, model.G_I
    C_Y = np.swapaxes(A, 1, 2) - _es("uma,umn,ubn->uab", Gam, Rinv, B)
    C_X = model.Q - _es("uma,umn,unb->uab", Gam, Rinv, Gam)
    G_Q = _cost_kernel(grid, model.Gt_Q, model.Q)
    G_P = _cost_kernel(grid, model.Gt_P, model.P)
    Phi_X = (G_Q
             - _es("uma,umn,uvnb->uvab", Gam, Rinv, G_I)
             - _es("vuma,vmn,vnb->uvab", G_I, Rinv, Gam)
             - _es("wuma,w,wmn,wvnb->uvab", G_I, w, Rinv, G_I))
    Phi_Y = (np.transpose(model.G_A, (1, 0, 3, 2))
             - _es("vuma,vmn,vbn->uvab", G_I, Rinv, B))
    return DerivedCoefficients(C_Y, C_X, Phi_X, Phi_Y, G_Q, G_P)


class HermitePath:
    """Values and time derivatives on a uniform grid; cubic Hermite in between."""

    def __init__(self, times: np.ndarray, values: np.ndarray, derivs: np.ndarray):
        self.times = times
        self.values = values
        self.derivs = derivs

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def at(self, t: float) -> np.ndarray:
        times = self.times
        T = times[-1]
        if not (0.0 <= t <= T):
            raise ValueError(f"time {t} outside [0, {T}]")
        h = T / self.n_steps
        k = min(int(np.floor(t / h)), self.n_steps - 1)
        s = (t - times[k]) / h
        if abs(s) < 1e-12:
            return self.values[k]
        if abs(s - 1.0) < 1e-12:
            return self.values[k + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.values[k] + h10 * h * self.derivs[k]
                + h01 * self.values[k + 1] + h11 * h * self.derivs[k + 1])


def _time_grid(T: float, n_steps: int) -> np.ndarray:
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError("n_steps must be a positive integer")
    return np.linspace(0.0, T, int(n_steps) + 1)


def _backward_rk4(rhs, terminal, times, symmetrize, label):
    """Integrate y' = -rhs(t, y) backward from y(T) = terminal."""
    S = times.size - 1
    h = times[1] - times[0]
    values = np.empty((S + 1,) + terminal.shape)
    derivs = np.empty_like(values)
    values[S] = terminal
    y = terminal
    for k in range(S - 1, -1, -1):
        t1, t0 = times[k + 1], times[k]
        tm = 0.5 * (t0 + t1)
        # overflow is detected below and reported as a blow-up
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(t1, y)
            k2 = rhs(tm, y + 0.5 * h * k1)
            k3 = rhs(tm, y + 0.5 * h * k2)
            k4 = rhs(t0, y + h * k3)
            y = symmetrize(y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(y)):
            raise BlowUpError(f"{label} integration produced non-finite values", t0)
        values[k] = y
    for k in range(S + 1):
        derivs[k] = -rhs(times[k], values[k])
    return HermitePath(times, values, derivs)


def _sym(K):
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def _pair_sym(Kb):
    return 0.5 * (Kb + np.transpose(Kb, (1, 0, 3, 2)))


def _tr(X):
    return np.swapaxes(X, -1, -2)


def _pair_tr(X):
    # [u, v] -> X(v, u)'
    return np.transpose(X, (1, 0, 3, 2))


def _kint(X, Y, w):
    """int X(u, z) Y(z, v) dz for kernels X (n, n, p, r) and Y (n, n, r, q)."""
    n, _, p, r = X.shape
    q = Y.shape[3]
    Xb = X.transpose(0, 2, 1, 3).reshape(n * p, n * r)
    Yb = Y.transpose(0, 2, 1, 3).reshape(n * r, n * q) * np.repeat(w, r)[:, None]
    return (Xb @ Yb).reshape(n, p, n, q).transpose(0, 2, 1, 3)


def _K_rhs(model: LQModel):
    A, Q, Gam = model.A, model.Q, model.Gamma
    At, Bt = _tr(model.A), _tr(model.B)
    Rinv = np.linalg.inv(model.R)

    def rhs(t, K):
        M = Bt @ K + Gam
        return At @ K + K @ A + Q - _tr(M) @ Rinv @ M
    return rhs


def solve_K(model: LQModel, grid: LabelGrid, n_steps: int = 400) -> HermitePath:
    _check_grid(model, grid)
    times = _time_grid(model.T, n_steps)
    return _backward_rk4(_K_rhs(model), model.P.copy(), times, _sym, "K")


def _Kbar_rhs(model: LQModel, grid: LabelGrid, coeffs: DerivedCoefficients, K_path: HermitePath):
    w = grid.weights
    A, Gam, G_A, G_I = model.A, model.Gamma, model.G_A, model.G_I
    At, Bt = _tr(model.A), _tr(model.B)
    G_At = _pair_tr(G_A)
    Rinv = np.linalg.inv(model.R)
    G_Q = coeffs.G_Q

    def rhs(t, Kb):
        K = K_path.at(t)
        M = Bt @ K + Gam
        V1 = Bt[:, None] @ Kb + G_I
        V2 = Bt[:, None] @ _pair_tr(Kb) + G_I
        V2t = _pair_tr(V2)
        psi = (K[:, None] @ G_A + G_At @ K[None]
               + At[:, None] @ Kb + Kb @ A[None]
               + _kint(Kb, G_A, w) + _kint(G_At, Kb, w) + G_Q)
        return (psi
                - (_tr(M) @ Rinv)[:, None] @ V1
                - V2t @ (Rinv @ M)[None]
                - _kint(V2t, Rinv[:, None] @ V1, w))
    return rhs


def solve_Kbar(model: LQModel, grid: LabelGrid, coeffs: DerivedCoefficients,
               K_path: HermitePath) -> HermitePath:
    _check_grid(model, grid)
    rhs = _Kbar_rhs(model, grid, coeffs, K_path)
    return _backward_rk4(rhs, coeffs.G_P.copy(), K_path.times, _pair_sym, "Kbar")


def _Lambda_rhs(model: LQModel, grid: LabelGrid, K_path: HermitePath, Kbar_path: HermitePath,
                convention: str):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    w = grid.weights
    Gam, G_I = model.Gamma, model.G_I
    At, Bt = _tr(model.A), _tr(model.B)
    G_At = _pair_tr(model.G_A)
    beta = model.beta[..., None]
    Rinv = np.linalg.inv(model.R)
    derived = convention == "derived"

    def integral(X, v):
        # int X(u, z) v(z) dz for kernel X (n, n, p, q) and field v (n, q, 1)
        return np.einsum("uzpq,z,zqr->upr", X, w, v)

    def rhs(t, Lam):
        K = K_path.at(t)
        Kb = Kbar_path.at(t)
        L = Lam[..., None]
        M = Bt @ K + Gam
        V2t = _pair_tr(Bt[:, None] @ _pair_tr(Kb) + G_I)
        RBL = Rinv @ (Bt @ L)
        out = (K @ beta + integral(Kb, beta) - _tr(M) @ RBL + integral(G_At, L))
        cross = integral(V2t, RBL)
        if derived:
            out = out + At @ L - cross
        else:
            out = out + cross
        return out[..., 0]
    return rhs


def solve_Lambda(model: LQModel, grid: LabelGrid, K_path: HermitePath, Kbar_path: HermitePath,
                 convention: str = "derived") -> HermitePath:
    _check_grid(model, grid)
    rhs = _Lambda_rhs(model, grid, K_path, Kbar_path, convention)
    terminal = np.zeros_like(model.beta)
    return _backward_rk4(rhs, terminal, K_path.times, lambda x: x, "Lambda")


@dataclass(frozen=True)
class RiccatiSolution:
    model: LQModel
    grid: LabelGrid
    coeffs: DerivedCoefficients
    K_path: HermitePath
    Kbar_path: HermitePath
    Lambda_path: HermitePath
    convention: str = "derived"

    @property
    def times(self) -> np.ndarray:
        return self.K_path.times

    @property
    def n_steps(self) -> int:
        return self.K_path.n_steps

    @property
    def T(self) -> float:
        return self.model.T

    @property
    def K(self) -> np.ndarray:
        return self.K_path.values

    @property
    def Kbar(self) -> np.ndarray:
        return self.Kbar_path.values

    @property
    def Lambda(self) -> np.ndarray:
        return self.Lambda_path.values

    def at(self, t: float):
        """(K, Kbar, Lambda) at time t."""
        return self.K_path.at(t), self.Kbar_path.at(t), self.Lambda_path.at(t)


def solve_all(model: LQModel, grid: LabelGrid, n_steps: int = 400,
              convention: str = "derived") -> RiccatiSolution:
    coeffs = derived_coefficients(model, grid)
    K = solve_K(model, grid, n_steps)
    Kb = solve_Kbar(model, grid, coeffs, K)
    Lam = solve_Lambda(model, grid, K, Kb, convention)
    return RiccatiSolution(model, grid, coeffs, K, Kb, Lam, convention)


# ----------------------------------------------------------------------------
# feedback


@dataclass(frozen=True)
class AffineFeedback:
    """Control law a = offset_i + gain_i x + int cross(u_i, v) m^v dv.

    Built from a Riccati solution; `shift` and `tilt` add a time-constant
    offset (n, m) and state gain (n, m, d) on top, which is how perturbed
    feedback laws are represented.
    """

    sol: RiccatiSolution
    shift: np.ndarray | None = None
    tilt: np.ndarray | None = None

    def coefficients(self, t: float):
        model = self.sol.model
        K, Kb, Lam = self.sol.at(t)
        Rinv = np.linalg.inv(model.R)
        offset = -_es("umn,uan,ua->um", Rinv, model.B, Lam)
        gain = -_es("umn,una->uma", Rinv, _es("ubn,uba->una", model.B, K) + model.Gamma)
        cross = -_es("umn,uvna->uvma", Rinv, _es("ubn,uvba->uvna", model.B, Kb) + model.G_I)
        if self.shift is not None:
            offset = offset + self.shift
        if self.tilt is not None:
            gain = gain + self.tilt
        return offset, gain, cross

    def perturbed(self, shift=None, tilt=None) -> "AffineFeedback":
        def add(a, b):
            if b is None:
                return a
            return b if a is None else a + b
        return AffineFeedback(self.sol, add(self.shift, shift), add(self.tilt, tilt))


def feedback_control(sol: RiccatiSolution, t: float, i: int, x, means) -> np.ndarray:
    """Optimal action for label i at time t, state x (..., d) and mean field (n, d)."""
    if not (0.0 <= t <= sol.T):
        raise ValueError(f"time {t} outside [0, {sol.T}]")
    means = np.asarray(means, dtype=float)
    offset, gain, cross = AffineFeedback(sol).coefficients(t)
    coupled = _es("vma,v,va->m", cross[i], sol.grid.weights, means)
    return offset[i] + np.asarray(x, dtype=float) @ gain[i].T + coupled


def riccati_rows(sol: RiccatiSolution):
    """Rows (t, i, j or '', entries...) for K, Kbar and Lambda, as three lists."""
    times = sol.times
    n = sol.grid.n_labels
    K_rows, Kb_rows, L_rows = [], [], []
    for k, t in enumerate(times):
        for i in range(n):
            K_rows.append((t, i, "", *sol.K[k, i].ravel()))
            L_rows.append((t, i, "", *sol.Lambda[k, i].ravel()))
            for j in range(n):
                Kb_rows.append((t, i, j, *sol.Kbar[k, i, j].ravel()))
    return K_rows, Kb_rows, L_rows
