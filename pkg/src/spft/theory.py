"""Closed-form analysis of starting-point regularization on quadratic objectives.

For J(w) = (1/2)(w - w*)' H (w - w*) with H symmetric PSD, the minimizer of
J + (alpha/2)||w - w0||^2 satisfies H(w~ - w*) + alpha(w~ - w0) = 0.  In the
eigenbasis H = Q Lambda Q', each coordinate of w~ is a convex combination of
the corresponding coordinates of w* and w0 with weights lambda_i/(lambda_i+alpha)
and alpha/(lambda_i+alpha).  Plain L2 instead rescales the w* coordinates by
lambda_i/(lambda_i+alpha).  This module computes those closed forms with a
self-contained cyclic Jacobi eigensolver and cross-checks them against plain
gradient descent.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with A = V diag(e) V', unsorted.
    Converges when the off-diagonal Frobenius norm drops below ``tol``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0.0):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # stable rotation angle: tan(2 phi) = 2 a_pq / (a_qq - a_pp)
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) \
                    if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = a[:, p].copy()
                rq = a[:, q].copy()
                a[:, p] = c * rp - s * rq
                a[:, q] = s * rp + c * rq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.diag(a).copy(), v


@dataclass
class QuadraticModel:
    """Quadratic objective data: Hessian, its eigenfactors, optimum, reference."""
    hessian: np.ndarray
    w_star: np.ndarray
    w0: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_hessian(cls, hessian, w_star, w0) -> "QuadraticModel":
        hessian = np.asarray(hessian, dtype=np.float64)
        w_star = np.asarray(w_star, dtype=np.float64)
        w0 = np.asarray(w0, dtype=np.float64)
        eigvals, eigvecs = jacobi_eigh(hessian)
        recon = eigvecs @ np.diag(eigvals) @ eigvecs.T
        if np.abs(recon - hessian).max() >= 1e-10:
            raise ValueError("eigendecomposition failed to reconstruct the Hessian")
        if np.abs(eigvecs.T @ eigvecs - np.eye(hessian.shape[0])).max() >= 1e-10:
            raise ValueError("eigenvectors lost orthogonality")
        if eigvals.min(initial=0.0) < -1e-12:
            raise ValueError("Hessian is not positive semidefinite")
        eigvals = np.maximum(eigvals, 0.0)
        return cls(hessian, w_star, w0, eigvals, eigvecs)

    @classmethod
    def random(cls, d: int, seed: int) -> "QuadraticModel":
        """Random PSD model H = A'A/d; occasional near-zero eigenvalues occur."""
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(d, d))
        h = a.T @ a / d
        h = 0.5 * (h + h.T)
        return cls.from_hessian(h, rng.normal(size=d), rng.normal(size=d))

    @property
    def dim(self) -> int:
        return self.w_star.size


def analytic_sp_minimizer(model: QuadraticModel, alpha: float) -> np.ndarray:
    """Minimizer of J + (alpha/2)||w - w0||^2 in closed form."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lam = model.eigvals
    if alpha == 0.0 and lam.min() == 0.0:
        raise ValueError("alpha = 0 requires a nonsingular Hessian")
    q = model.eigvecs
    coords = (lam * (q.T @ model.w_star) + alpha * (q.T @ model.w0)) / (lam + alpha)
    return q @ coords


def mixing_coefficients(model: QuadraticModel, alpha: float):
    """Per-eigendirection weights (a_i, b_i) on w* and w0; a_i + b_i = 1."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = model.eigvals
    return lam / (lam + alpha), alpha / (lam + alpha)


def l2_minimizer(model: QuadraticModel, alpha: float) -> np.ndarray:
    """Minimizer of J + (alpha/2)||w||^2 in closed form."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lam = model.eigvals
    if alpha == 0.0 and lam.min() == 0.0:
        raise ValueError("alpha = 0 requires a nonsingular Hessian")
    q = model.eigvecs
    return q @ ((lam / (lam + alpha)) * (q.T @ model.w_star))


def l2_rescaling_check(model: QuadraticModel, alpha: float) -> np.ndarray:
    """Per-eigendirection scale factors lambda_i / (lambda_i + alpha) of the
    plain-L2 minimizer relative to the unregularized optimum."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = model.eigvals
    return lam / (lam + alpha)


def stationarity_residual(model: QuadraticModel, alpha: float, w: np.ndarray) -> float:
    """Max-norm of H(w - w*) + alpha(w - w0)."""
    r = model.hessian @ (w - model.w_star) + alpha * (w - model.w0)
    return float(np.abs(r).max())


def empirical_descent_check(model: QuadraticModel, alpha: float, penalty_kind: str = "L2SP",
                            seed: int = 0, grad_tol: float = 1e-12,
                            max_iters: int = 2_000_000) -> float:
    """Gradient descent on the regularized quadratic vs the closed form.

    Descends from a random start until the gradient max-norm falls below
    ``grad_tol``; halves the step on divergence (up to 60 times).  Returns
    the max-norm gap between the numeric and analytic minimizers.
    """
    if penalty_kind not in ("L2", "L2SP"):
        raise ValueError("penalty_kind must be L2 or L2SP")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ref = model.w0 if penalty_kind == "L2SP" else np.zeros(model.dim)
    analytic = analytic_sp_minimizer(model, alpha) if penalty_kind == "L2SP" \
        else l2_minimizer(model, alpha)
    rng = np.random.default_rng(seed)
    start = rng.normal(size=model.dim)
    lmax = float(model.eigvals.max())
    step = 1.0 / (lmax + alpha)
    h = model.hessian
    for _ in range(61):
        w = start.copy()
        g = h @ (w - model.w_star) + alpha * (w - ref)
        g0 = np.abs(g).max()
        diverged = False
        for _ in range(max_iters):
            gn = np.abs(g).max()
            if gn <= grad_tol:
                return float(np.abs(w - analytic).max())
            if not np.isfinite(gn) or gn > 1e6 * (g0 + 1.0):
                diverged = True
                break
            w -= step * g
            g = h @ (w - model.w_star) + alpha * (w - ref)
        if not diverged:
            break
        step *= 0.5
    else:
        raise RuntimeError("gradient descent diverged even after 60 step halvings")
    raise RuntimeError("gradient descent did not reach the tolerance")


@dataclass
class VerificationRow:
    trial: int
    d: int
    alpha: float
    residual: float
    min_coeff: float
    max_coeff: float


def run_verification(trials: int = 100, max_dim: int = 50, seed: int = 0):
    """Random-model sweep: descent-vs-analytic residuals and coefficient ranges."""
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(trials):
        d = int(rng.integers(2, max_dim + 1))
        alpha = float(10.0 ** rng.uniform(-1.0, 1.0))
        model = QuadraticModel.random(d, seed=int(rng.integers(0, 2**31)))
        residual = empirical_descent_check(model, alpha, "L2SP", seed=t)
        a, b = mixing_coefficients(model, alpha)
        coeffs = np.concatenate([a, b])
        rows.append(VerificationRow(t, d, alpha, residual,
                                    float(coeffs.min()), float(coeffs.max())))
    return rows


def write_verification_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "d", "alpha", "residual", "min_coeff", "max_coeff"])
        for r in rows:
            writer.writerow([r.trial, r.d, repr(r.alpha), repr(r.residual),
                             repr(r.min_coeff), repr(r.max_coeff)])
