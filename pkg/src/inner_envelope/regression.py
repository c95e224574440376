"""
Coefficient estimators and the pseudo-outcome prediction pipeline.

Covers OLS, the parametric inner-envelope fit (Grassmann objective searched in
subspace coordinates, then the maximum-likelihood coefficient display), the
coefficient map from any estimated bases, and the envelope and response-PLS
baselines.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from sklearn.neighbors import KNeighborsRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .dataset import Dataset
from .errors import DataError, DimensionError, EstimationError, SingularBlockError
from .subspace import (
    Basis,
    InnerEnvelopeBases,
    SubspaceCoords,
    basis_to_coords,
    check_dims,
    coords_to_basis,
    orth_complement,
    projection,
)

logger = logging.getLogger(__name__)

DEFAULT_FRAME_STARTS = 20


@dataclass(frozen=True)
class MomentMatrices:
    """Sample covariances of fitted values, residuals and responses, and OLS beta (r x p)."""

    S_fit: np.ndarray
    S_res: np.ndarray
    S_Y: np.ndarray
    beta_ols: np.ndarray


@dataclass(frozen=True)
class BetaEstimate:
    """Coefficient estimate and, for envelope-type fits, its coordinates."""

    beta: np.ndarray
    method: str
    zeta1: Optional[np.ndarray] = None
    zeta2: Optional[np.ndarray] = None
    Omega1: Optional[np.ndarray] = None
    Omega0: Optional[np.ndarray] = None
    Sigma: Optional[np.ndarray] = None


def compute_moments(dataset: Dataset) -> MomentMatrices:
    """
    OLS decomposition of the centered responses.

    Raises:
        EstimationError: If X^T X is singular
    """
    X, Y, n = dataset.X, dataset.Y, dataset.n
    xtx = X.T @ X
    if np.linalg.cond(xtx) > 1e12:
        raise EstimationError("Design matrix is singular; OLS is not defined", {"p": dataset.p})
    try:
        beta_t = np.linalg.solve(xtx, X.T @ Y)
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"OLS solve failed: {e}") from e
    fitted = X @ beta_t
    resid = Y - fitted
    return MomentMatrices(fitted.T @ fitted / n, resid.T @ resid / n, Y.T @ Y / n, beta_t.T)


def population_moments(cov_y: np.ndarray, cov_yx: np.ndarray, cov_x: np.ndarray) -> MomentMatrices:
    """Moment matrices implied by population covariances (linear projection of Y on X)."""
    cov_y = np.asarray(cov_y, dtype=float)
    cov_yx = np.asarray(cov_yx, dtype=float)
    beta = cov_yx @ np.linalg.inv(cov_x)
    s_fit = beta @ cov_x @ beta.T
    return MomentMatrices(s_fit, cov_y - s_fit, cov_y, beta)


def fit_ols(dataset: Dataset) -> BetaEstimate:
    moments = compute_moments(dataset)
    return BetaEstimate(moments.beta_ols, "ols", Sigma=moments.S_res)


def _logdet(mat: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(mat)
    return value if sign > 0 else np.inf


def inner_envelope_objective(G: Basis, moments: MomentMatrices, d: int) -> float:
    """
    Inner-envelope objective at the candidate S1 basis G.

    log|G'S_res G| + log|G'S_res^-1 G| + sum of log(1 + lambda) over the
    r - u - d smallest eigenvalues of the complement's fitted-to-residual ratio.
    """
    G0 = orth_complement(G)
    n_small = G0.k_dim - d
    value = _logdet(G.mat.T @ moments.S_res @ G.mat)
    value += _logdet(G.mat.T @ np.linalg.solve(moments.S_res, G.mat))
    resid0 = G0.mat.T @ moments.S_res @ G0.mat
    fit0 = G0.mat.T @ moments.S_fit @ G0.mat
    try:
        lam = scipy.linalg.eigh(fit0, resid0, eigvals_only=True)
    except np.linalg.LinAlgError:
        return np.inf
    return float(value + np.sum(np.log1p(np.maximum(lam[:n_small], 0.0))))


def envelope_objective(G: Basis, moments: MomentMatrices) -> float:
    """Response-envelope objective log|G'S_res G| + log|G'S_Y^-1 G|."""
    return float(
        _logdet(G.mat.T @ moments.S_res @ G.mat) + _logdet(G.mat.T @ np.linalg.solve(moments.S_Y, G.mat))
    )


def _frame_candidates(vectors: np.ndarray, u: int, limit: int) -> List[np.ndarray]:
    """Coordinates of spans of u-subsets of the given columns, where charted."""
    out = []
    for cols in combinations(range(vectors.shape[1]), u):
        if len(out) >= limit:
            break
        try:
            out.append(basis_to_coords(Basis.from_span(vectors[:, list(cols)])).vec)
        except SingularBlockError:
            continue
    return out


def minimize_frame(
    objective: Callable[[Basis], float],
    r: int,
    u: int,
    candidates: List[np.ndarray],
    starts: int,
    seed: int,
) -> Tuple[Basis, float, List[float]]:
    """
    Multi-start search over u-dimensional subspaces of R^r in coordinates.

    Nelder-Mead explores from each start and BFGS polishes; a start is never
    replaced by a worse point.

    Returns:
        Best basis, its objective value, and the objective at every start
    """
    rng = np.random.default_rng(seed)
    size = (r - u) * u
    inits = list(candidates)[:starts]
    while len(inits) < starts:
        inits.append(rng.standard_normal(size))

    def fun(vec: np.ndarray) -> float:
        if not np.all(np.isfinite(vec)):
            return np.inf
        return objective(coords_to_basis(SubspaceCoords(vec, r, u)))

    best_vec, best_val = None, np.inf
    start_values = []
    for idx, x0 in enumerate(inits):
        f0 = fun(x0)
        start_values.append(f0)
        x, fx = x0, f0
        explore = minimize(fun, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400 * max(size, 1)})
        if explore.fun < fx:
            x, fx = explore.x, explore.fun
        polish = minimize(fun, x, method="BFGS", options={"gtol": 1e-10})
        if np.isfinite(polish.fun) and polish.fun < fx:
            x, fx = polish.x, polish.fun
        logger.debug("frame start %d: %.6g -> %.6g", idx, f0, fx)
        if fx < best_val:
            best_vec, best_val = x, fx
    if best_vec is None:
        raise EstimationError("Subspace search failed from every start")
    return coords_to_basis(SubspaceCoords(best_vec, r, u)), float(best_val), start_values


def _sym_power(mat: np.ndarray, power: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if np.any(vals <= 0):
        raise EstimationError("Matrix is not positive definite", {"min_eigenvalue": float(vals.min())})
    return (vecs * vals**power) @ vecs.T


def inflated_omega0(Gamma0: Basis, moments: MomentMatrices, n_small: int) -> np.ndarray:
    """
    Covariance of Gamma0'Y with the fitted variation of the r - u - d weakest
    directions folded back into the residual covariance.
    """
    resid0 = Gamma0.mat.T @ moments.S_res @ Gamma0.mat
    fit0 = Gamma0.mat.T @ moments.S_fit @ Gamma0.mat
    half = _sym_power(resid0, 0.5)
    mhalf = _sym_power(resid0, -0.5)
    lam, vecs = np.linalg.eigh(mhalf @ fit0 @ mhalf)
    kept = np.zeros_like(lam)
    kept[:n_small] = lam[:n_small]
    return resid0 + half @ (vecs * kept) @ vecs.T @ half


def b_from_omega0(Gamma0: Basis, omega0: np.ndarray, moments: MomentMatrices, d: int) -> Basis:
    """span(B) = Omega0^(1/2) times the top-d eigenvectors of Omega0^(-1/2) (Gamma0'S_fit Gamma0) Omega0^(-1/2)."""
    fit0 = Gamma0.mat.T @ moments.S_fit @ Gamma0.mat
    mhalf = _sym_power(omega0, -0.5)
    _, vecs = np.linalg.eigh(mhalf @ fit0 @ mhalf)
    top = vecs[:, ::-1][:, :d]
    return Basis.from_span(_sym_power(omega0, 0.5) @ top)


def _coefficients(
    dataset: Dataset,
    moments: MomentMatrices,
    Gamma: Basis,
    Gamma0: Basis,
    B: Basis,
    omega0: np.ndarray,
    method: str,
) -> BetaEstimate:
    zeta1 = Gamma.mat.T @ moments.beta_ols
    omega1 = Gamma.mat.T @ moments.S_res @ Gamma.mat
    omega0_inv_b = np.linalg.solve(omega0, B.mat)
    zeta2 = np.linalg.solve(B.mat.T @ omega0_inv_b, omega0_inv_b.T @ Gamma0.mat.T @ moments.beta_ols)
    beta = Gamma.mat @ zeta1 + Gamma0.mat @ B.mat @ zeta2
    sigma = Gamma.mat @ omega1 @ Gamma.mat.T + Gamma0.mat @ omega0 @ Gamma0.mat.T
    return BetaEstimate(beta, method, zeta1, zeta2, omega1, omega0, sigma)


def beta_from_bases(dataset: Dataset, bases: InnerEnvelopeBases, method: str = "bases") -> BetaEstimate:
    """
    Maximum-likelihood coefficient display evaluated at supplied bases.

    Raises:
        EstimationError: If the inflated Omega0 is singular
    """
    moments = compute_moments(dataset)
    omega0 = inflated_omega0(bases.Gamma0, moments, bases.B0.k_dim)
    try:
        return _coefficients(dataset, moments, bases.Gamma, bases.Gamma0, bases.B, omega0, method)
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"Singular Omega0: {e}") from e


def fit_parametric_inner_envelope(
    dataset: Dataset,
    u: int,
    d: int,
    starts: int = DEFAULT_FRAME_STARTS,
    seed: int = 0,
    moments: Optional[MomentMatrices] = None,
) -> Tuple[InnerEnvelopeBases, BetaEstimate]:
    """
    Parametric inner-envelope estimator.

    Args:
        dataset: Centered data
        u: dim(S1)
        d: dim(S2)
        starts: Number of starting points for the Grassmann search
        seed: Seed for random starts
        moments: Precomputed (or population) moment matrices

    Returns:
        Estimated bases and coefficient estimate
    """
    r = dataset.r
    check_dims(r, u, d)
    moments = moments or compute_moments(dataset)
    _, eigvecs = np.linalg.eigh(moments.S_res)
    gamma, value, _ = minimize_frame(
        lambda G: inner_envelope_objective(G, moments, d),
        r,
        u,
        _frame_candidates(eigvecs, u, starts // 2),
        starts,
        seed,
    )
    gamma0 = orth_complement(gamma)
    omega0 = inflated_omega0(gamma0, moments, r - u - d)
    B = b_from_omega0(gamma0, omega0, moments, d)
    bases = InnerEnvelopeBases(gamma, gamma0, B, orth_complement(B))
    logger.info("Parametric inner envelope (u=%d, d=%d): objective %.6g", u, d, value)
    return bases, _coefficients(dataset, moments, gamma, gamma0, B, omega0, "innenv")


def fit_envelope_baseline(dataset: Dataset, u: int, starts: int = 10, seed: int = 0) -> BetaEstimate:
    """Response envelope: beta = P_G beta_ols with G minimizing the envelope objective."""
    r = dataset.r
    if not 1 <= u <= r:
        raise DimensionError(f"Envelope dimension must be in [1, {r}], got {u}")
    moments = compute_moments(dataset)
    if u == r:
        return BetaEstimate(moments.beta_ols, "envelope", Sigma=moments.S_res)
    _, eigvecs = np.linalg.eigh(moments.S_res)
    G, _, _ = minimize_frame(
        lambda G: envelope_objective(G, moments), r, u, _frame_candidates(eigvecs, u, starts // 2), starts, seed
    )
    P = projection(G)
    Q = np.eye(r) - P
    sigma = P @ moments.S_res @ P + Q @ moments.S_Y @ Q
    return BetaEstimate(P @ moments.beta_ols, "envelope", Sigma=sigma)


def fit_response_pls(dataset: Dataset, ncomp: int) -> BetaEstimate:
    """Response-side principal fitted components: project OLS onto the top eigenvectors of S_fit."""
    r = dataset.r
    if not 1 <= ncomp <= r:
        raise DimensionError(f"ncomp must be in [1, {r}], got {ncomp}")
    moments = compute_moments(dataset)
    _, vecs = np.linalg.eigh(moments.S_fit)
    W = vecs[:, ::-1][:, :ncomp]
    return BetaEstimate(W @ W.T @ moments.beta_ols, "pls", Sigma=moments.S_res)


def _material_frame(bases: InnerEnvelopeBases) -> np.ndarray:
    return np.hstack([bases.Gamma.mat, bases.Gamma0.mat @ bases.B.mat])


def pseudo_outcomes(bases: InnerEnvelopeBases, Y: np.ndarray) -> np.ndarray:
    """(Gamma'Y, B'Gamma0'Y) per row."""
    return np.asarray(Y, dtype=float) @ _material_frame(bases)


def back_transform(bases: InnerEnvelopeBases, Ytilde: np.ndarray) -> np.ndarray:
    return np.asarray(Ytilde, dtype=float) @ _material_frame(bases).T


def knn_predict(train_X: np.ndarray, train_Ytilde: np.ndarray, test_X: np.ndarray, k: int) -> np.ndarray:
    """
    k-nearest-neighbour means in standardized X space.

    Raises:
        DataError: Empty training set or k larger than it
    """
    train_X = np.atleast_2d(np.asarray(train_X, dtype=float))
    if train_X.shape[0] == 0:
        raise DataError("Empty training set")
    if not 1 <= k <= train_X.shape[0]:
        raise DataError(f"k must be in [1, {train_X.shape[0]}], got {k}")
    model = make_pipeline(StandardScaler(), KNeighborsRegressor(n_neighbors=k, algorithm="brute"))
    model.fit(train_X, train_Ytilde)
    return model.predict(np.atleast_2d(np.asarray(test_X, dtype=float)))


def predict_responses(
    X_train: np.ndarray,
    Y_train: np.ndarray,
    X_new: np.ndarray,
    bases: Optional[InnerEnvelopeBases] = None,
    k: int = 10,
) -> np.ndarray:
    """
    Predicted responses at X_new.

    With bases, the learner is trained on the pseudo-outcomes and its output
    mapped back to response space; otherwise it is trained on Y directly.
    """
    Y_train = np.asarray(Y_train, dtype=float)
    y_mean = Y_train.mean(axis=0)
    target = Y_train - y_mean
    if bases is None:
        pred = knn_predict(X_train, target, X_new, k)
    else:
        pred = back_transform(bases, knn_predict(X_train, pseudo_outcomes(bases, target), X_new, k))
    return np.reshape(pred, (-1, Y_train.shape[1])) + y_mean


def prediction_rmse(
    X_train: np.ndarray,
    Y_train: np.ndarray,
    X_test: np.ndarray,
    Y_test: np.ndarray,
    bases: Optional[InnerEnvelopeBases] = None,
    k: int = 10,
) -> float:
    """
    Test RMSE of the pseudo-outcome pipeline, or of the naive full-response
    pipeline when bases is None.
    """
    err = np.asarray(Y_test, dtype=float) - predict_responses(X_train, Y_train, X_test, bases, k)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
