"""Weighted least-squares engine used by every fit in the package.

Two entry points: :func:`fit_nlls` (Levenberg-Marquardt with central-difference
Jacobians) for nonlinear models, and :func:`fit_linear` / :func:`fit_polynomial`
for models that are linear in their parameters.  Weights are ``1/sigma`` per
point.  Covariances follow the usual "relative sigma" convention: the inverse
curvature matrix is scaled by the reduced chi-square.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IllConditioned, NoConvergence, NonFiniteModel, SingularJacobian

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]

# condition-number guards on the column-scaled normal matrix
_SINGULAR_COND = 1e15
_ILL_COND = 1e12


@dataclass(frozen=True)
class FitProblem:
    """A model ``model(params, x) -> y`` plus data, ``1/sigma`` weights and a start point.

    ``scale`` optionally gives each parameter's typical magnitude; it sets the
    finite-difference steps and the convergence test.  By default a nonzero
    start value is its own scale and a zero one gets 1.
    """

    model: Model
    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    initial_params: np.ndarray
    scale: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        p0 = np.atleast_1d(np.asarray(self.initial_params, dtype=float))
        if not (len(x) == len(y) == len(w)):
            raise ValueError(f"x, y, weights lengths differ: {len(x)}, {len(y)}, {len(w)}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and > 0")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        if len(p0) < 1:
            raise ValueError("need at least one parameter")
        if len(y) < len(p0):
            raise ValueError(f"{len(y)} points cannot constrain {len(p0)} parameters")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "initial_params", p0)
        if self.scale is not None:
            sc = np.broadcast_to(np.abs(np.asarray(self.scale, dtype=float)), p0.shape).copy()
            if not np.all(np.isfinite(sc)) or np.any(sc <= 0):
                raise ValueError("parameter scales must be finite and > 0")
            object.__setattr__(self, "scale", sc)


@dataclass
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    chi2_reduced: float
    n_iterations: int
    converged: bool
    residuals: np.ndarray = field(repr=False)  # weighted, (y - model) * w
    dof: int = 0

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def require_converged(result: FitResult) -> FitResult:
    if not result.converged:
        raise NoConvergence(
            f"fit did not converge after {result.n_iterations} iterations", result
        )
    return result


def _evaluate(model, params, x):
    with np.errstate(all="ignore"):
        return np.asarray(model(params, x), dtype=float)


def numeric_jacobian(model: Model, params, x, rel_step=1e-6, typical=None) -> np.ndarray:
    """Central-difference Jacobian d model / d params, shape (n_points, n_params).

    The step for parameter j is ``rel_step * max(|p_j|, typical_j)``; ``typical``
    defaults to 1 for parameters sitting at zero.
    """
    p = np.asarray(params, dtype=float)
    typ = np.ones_like(p) if typical is None else np.asarray(typical, dtype=float)
    cols = []
    for j in range(len(p)):
        h = rel_step * max(abs(p[j]), typ[j])
        up = p.copy()
        dn = p.copy()
        up[j] += h
        dn[j] -= h
        # use the exactly-representable step
        cols.append((_evaluate(model, up, x) - _evaluate(model, dn, x)) / (up[j] - dn[j]))
    return np.column_stack(cols)


def _canonical_order(*columns):
    # fixed reduction order, so permuting the data points cannot change the result
    keys = [np.asarray(c, dtype=float).reshape(len(columns[0]), -1) for c in columns]
    stacked = np.column_stack(keys)
    return np.lexsort(stacked.T[::-1])


def _scaled_inverse(A):
    d = np.sqrt(np.diag(A))
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise SingularJacobian("a parameter has no influence on the model")
    As = A / np.outer(d, d)
    if np.linalg.cond(As) > _SINGULAR_COND:
        raise SingularJacobian("normal equations are rank deficient")
    inv = np.linalg.inv(As) / np.outer(d, d)
    return 0.5 * (inv + inv.T)


def _chi2_reduced(resid, n_params):
    dof = len(resid) - n_params
    sse = float(resid @ resid)
    return (sse / dof if dof > 0 else 0.0), dof


def fit_nlls(
    problem: FitProblem,
    max_iter: int = 200,
    tol_rel: float = 1e-10,
    lambda0: float = 1e-3,
    rel_step: float = 1e-6,
) -> FitResult:
    """Levenberg-Marquardt minimisation of the weighted sum of squared residuals.

    Damping multiplies by 10 on a rejected step and divides by 10 on an
    accepted one, applied to the column-scaled normal matrix (Marquardt's
    diagonal scaling).  Converged means the proposed step changed every
    parameter by less than ``tol_rel`` relative to its magnitude (or to the
    magnitude of its start value, for parameters near zero).

    Raises NonFiniteModel if the model is not finite at the start point and
    SingularJacobian if the parameters are not identifiable.  Running out of
    iterations emits a warning and returns ``converged=False``.
    """
    model, x, y, w = problem.model, problem.x, problem.y, problem.weights
    order = _canonical_order(x, y, w) if x.ndim == 1 else np.arange(len(y))
    x, y, w = x[order], y[order], w[order]
    p = problem.initial_params.copy()
    typical = problem.scale if problem.scale is not None else np.where(p != 0, np.abs(p), 1.0)

    f = _evaluate(model, p, x)
    if f.shape != y.shape or not np.all(np.isfinite(f)):
        raise NonFiniteModel("model returned non-finite values at the initial parameters")
    r = w * (y - f)
    sse = float(r @ r)
    lam = lambda0
    converged = False
    it = 0
    J = None
    while it < max_iter:
        it += 1
        if J is None:
            J = w[:, None] * numeric_jacobian(model, p, x, rel_step, typical)
            if not np.all(np.isfinite(J)):
                raise NonFiniteModel("non-finite Jacobian")
            A = J.T @ J
            g = J.T @ r
            d = np.sqrt(np.diag(A))
            if np.any(d == 0):
                raise SingularJacobian("a parameter has no influence on the model")
            As = A / np.outer(d, d)
            gs = g / d
        step = np.linalg.solve(As + lam * np.eye(len(p)), gs) / d
        small = np.all(np.abs(step) <= tol_rel * np.maximum(np.abs(p), typical))
        p_new = p + step
        f_new = _evaluate(model, p_new, x)
        if np.all(np.isfinite(f_new)):
            r_new = w * (y - f_new)
            sse_new = float(r_new @ r_new)
        else:
            sse_new = np.inf
        if sse_new <= sse:
            p, r, sse = p_new, r_new, sse_new
            lam = max(lam / 10.0, 1e-12)
            J = None
        else:
            lam *= 10.0
        if small:
            converged = True
            break
        if lam > 1e20:
            # no downhill step exists at float precision
            converged = True
            break

    if not converged:
        warnings.warn(f"fit_nlls hit max_iter={max_iter} without converging", RuntimeWarning)

    J = w[:, None] * numeric_jacobian(model, p, x, rel_step, typical)
    chi2r, dof = _chi2_reduced(r, len(p))
    cov = _scaled_inverse(J.T @ J)
    if dof > 0:
        cov = cov * chi2r
    resid = np.empty_like(r)
    resid[order] = r
    return FitResult(p, cov, chi2r, it, converged, resid, dof)


def fit_linear(design, y, weights) -> FitResult:
    """Exact weighted linear least squares for ``y ~ design @ params``.

    Solved through the normal equations after scaling every column of the
    weighted design matrix to unit norm.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y) or len(y) != len(w):
        raise ValueError("design, y and weights have inconsistent shapes")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and > 0")
    order = _canonical_order(X, y, w)
    X, y, w = X[order], y[order], w[order]
    Xw = w[:, None] * X
    yw = w * y
    d = np.sqrt(np.einsum("ij,ij->j", Xw, Xw))
    if np.any(d == 0):
        raise IllConditioned("design matrix has an all-zero column")
    Xs = Xw / d
    N = Xs.T @ Xs
    cond = np.linalg.cond(N)
    if not np.isfinite(cond) or cond > _ILL_COND:
        raise IllConditioned(f"normal matrix condition number {cond:.3g} after scaling")
    beta = np.linalg.solve(N, Xs.T @ yw) / d
    r = yw - Xw @ beta
    chi2r, dof = _chi2_reduced(r, X.shape[1])
    Ninv = np.linalg.inv(N)
    cov = 0.5 * (Ninv + Ninv.T) / np.outer(d, d)
    if dof > 0:
        cov = cov * chi2r
    resid = np.empty_like(r)
    resid[order] = r
    return FitResult(beta, cov, chi2r, 1, True, resid, dof)


def polynomial_design(x, degree):
    return np.vander(np.asarray(x, dtype=float), degree + 1, increasing=True)


def fit_polynomial(x, y, weights=None, degree=2) -> FitResult:
    """Weighted polynomial fit; params are lowest order first, ``[c, b, a]`` for degree 2."""
    if not 0 <= degree <= 4:
        raise ValueError("degree must be between 0 and 4")
    x = np.asarray(x, dtype=float)
    if len(x) <= degree:
        raise ValueError(f"{len(x)} points cannot determine a degree-{degree} polynomial")
    w = np.ones_like(x) if weights is None else weights
    return fit_linear(polynomial_design(x, degree), y, w)


def poisson_weights(counts, floor=1.0):
    """``1/sqrt(counts)``, with counts floored so empty bins keep a finite weight."""
    c = np.asarray(counts, dtype=float)
    return 1.0 / np.sqrt(np.maximum(c, floor))
