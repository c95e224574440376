"""
GMM estimator of the inner-envelope parameters.

The moment function is the outer product of centered g(B0'Gamma0'Y) and
centered h(Gamma'Y, X); both are zero-covariance under the conditional
independence structure, so the sample means vanish at the true theta.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.stats
from scipy.optimize import least_squares, minimize

from .config import parallel_map
from .dataset import Dataset
from .errors import DimensionError, SingularBlockError
from .regression import compute_moments
from .subspace import (
    Basis,
    InnerEnvelopeBases,
    Theta,
    bases_to_theta,
    check_dims,
    finite_difference_jacobian,
    orth_complement,
    theta_to_bases,
)

logger = logging.getLogger(__name__)

TRANSFORMS = ("identity", "poly2")
DEFAULT_STARTS = 8


@dataclass(frozen=True)
class MomentConfig:
    """Instrument transforms: 'identity' or 'poly2' (values and their squares)."""

    g: str = "identity"
    h: str = "identity"

    def __post_init__(self):
        for tag in (self.g, self.h):
            if tag not in TRANSFORMS:
                raise DimensionError(f"Unknown moment transform {tag!r}; expected one of {TRANSFORMS}")

    def d_g(self, r: int, u: int, d: int) -> int:
        return (r - u - d) * (2 if self.g == "poly2" else 1)

    def d_h(self, u: int, p: int) -> int:
        return (u + p) * (2 if self.h == "poly2" else 1)


@dataclass(frozen=True)
class GmmResult:
    theta_hat: Theta
    bases: InnerEnvelopeBases
    objective_value: float
    covariance: np.ndarray
    C1: np.ndarray
    D1: np.ndarray
    converged: bool
    n_starts_used: int
    start_objectives: List[float] = field(default_factory=list)


def _transform(tag: str, values: np.ndarray) -> np.ndarray:
    if tag == "poly2":
        return np.hstack([values, values**2])
    return values


def moment_vector(theta: Theta, dataset: Dataset, config: Optional[MomentConfig] = None) -> np.ndarray:
    """
    Per-sample moments, n x (d_g * d_h).

    Row i is the row-wise vectorization of (g_i - mean g)(h_i - mean h)^T.
    """
    config = config or MomentConfig()
    bases = theta_to_bases(theta)
    Y = dataset.Y
    immaterial = Y @ bases.Gamma0.mat @ bases.B0.mat
    g = _transform(config.g, immaterial)
    h = _transform(config.h, np.hstack([Y @ bases.Gamma.mat, dataset.X]))
    g = g - g.mean(axis=0)
    h = h - h.mean(axis=0)
    return np.einsum("ia,ib->iab", g, h).reshape(dataset.n, -1)


def gmm_objective(theta: Theta, dataset: Dataset, config: Optional[MomentConfig] = None) -> float:
    """Squared norm of the mean moment vector."""
    mean = moment_vector(theta, dataset, config).mean(axis=0)
    return float(mean @ mean)


def heuristic_theta(dataset: Dataset, u: int, d: int) -> Theta:
    """
    Starting theta from OLS moments.

    S3 is taken as the r - u - d weakest directions of S_fit; within its
    complement, S1 is the u directions whose residual covariance with S3 is
    smallest and S2 is the rest.

    Raises:
        SingularBlockError: When the heuristic S1 or S2 cannot be charted
    """
    moments = compute_moments(dataset)
    r = dataset.r
    n3 = r - u - d
    _, vecs = np.linalg.eigh(moments.S_fit)
    s3 = Basis.from_span(vecs[:, :n3])
    rest = orth_complement(s3)
    cross = rest.mat.T @ moments.S_res @ s3.mat
    _, inner = np.linalg.eigh(cross @ cross.T)
    gamma = Basis.from_span(rest.mat @ inner[:, :u])
    s2 = Basis.from_span(rest.mat @ inner[:, u:])
    return bases_to_theta(InnerEnvelopeBases.from_subspaces(gamma, s2))


def _sandwich(C1: np.ndarray, D1: np.ndarray, n: int) -> np.ndarray:
    bread = np.linalg.pinv(C1.T @ C1)
    cov = bread @ C1.T @ D1 @ C1 @ bread / n
    return (cov + cov.T) / 2.0


def fit_gmm(
    dataset: Dataset,
    u: int,
    d: int,
    config: Optional[MomentConfig] = None,
    starts: int = DEFAULT_STARTS,
    seed: int = 0,
    jobs: Optional[int] = None,
) -> GmmResult:
    """
    Multi-start one-step GMM with identity weighting.

    Args:
        dataset: Centered data
        u: dim(S1)
        d: dim(S2)
        config: Moment transforms (identity by default)
        starts: Number of starts; the first is the OLS heuristic when it can be charted
        seed: Seed for the random starts
        jobs: Worker count for running starts in parallel

    Returns:
        Best local optimum with its sandwich covariance

    Raises:
        DimensionError: Invalid dims, too few moments, or n <= q
    """
    config = config or MomentConfig()
    r, p, n = dataset.r, dataset.p, dataset.n
    check_dims(r, u, d)
    q = (r - u) * u + (r - u - d) * d
    if config.d_g(r, u, d) * config.d_h(u, p) < q:
        raise DimensionError(
            f"{config.d_g(r, u, d) * config.d_h(u, p)} moments cannot identify {q} parameters",
            {"r": r, "u": u, "d": d, "p": p},
        )
    if n <= q:
        raise DimensionError(f"Need n > q = {q}, got n = {n}")

    rng = np.random.default_rng(seed)
    inits = []
    try:
        inits.append(heuristic_theta(dataset, u, d).vector)
    except SingularBlockError as e:
        logger.info("GMM heuristic start skipped: %s", e.message)
    while len(inits) < starts:
        inits.append(rng.standard_normal(q))

    def mean_moments(vec: np.ndarray) -> np.ndarray:
        return moment_vector(Theta.from_vector(vec, r, u, d), dataset, config).mean(axis=0)

    def objective(vec: np.ndarray) -> float:
        if not np.all(np.isfinite(vec)):
            return np.inf
        m = mean_moments(vec)
        return float(m @ m)

    def run_start(x0: np.ndarray) -> Tuple[np.ndarray, float, float, bool]:
        f0 = objective(x0)
        explore = minimize(objective, x0, method="Nelder-Mead", options={"maxiter": 200 * q, "xatol": 1e-8, "fatol": 1e-14})
        x = explore.x if explore.fun < f0 else x0
        polish = least_squares(mean_moments, x, method="lm", xtol=1e-12, ftol=1e-12, max_nfev=200 * (q + 1))
        fx = objective(x)
        if polish.success and np.all(np.isfinite(polish.x)) and objective(polish.x) <= fx:
            x, fx = polish.x, objective(polish.x)
        return x, fx, f0, bool(polish.success)

    outcomes = parallel_map(run_start, inits, jobs)
    for idx, (_, fx, f0, ok) in enumerate(outcomes):
        logger.debug("GMM start %d: %.6g -> %.6g (converged=%s)", idx, f0, fx, ok)
    best = min(range(len(outcomes)), key=lambda i: outcomes[i][1])
    x_hat, f_hat, _, converged = outcomes[best]
    theta_hat = Theta.from_vector(x_hat, r, u, d)

    C1 = finite_difference_jacobian(mean_moments, x_hat)
    D1 = np.cov(moment_vector(theta_hat, dataset, config), rowvar=False)
    D1 = np.atleast_2d(D1)
    if not converged:
        logger.warning("GMM: no start converged; best objective %.3g", f_hat)
    return GmmResult(
        theta_hat=theta_hat,
        bases=theta_to_bases(theta_hat),
        objective_value=max(f_hat, 0.0),
        covariance=_sandwich(C1, D1, n),
        C1=C1,
        D1=D1,
        converged=converged,
        n_starts_used=len(inits),
        start_objectives=[float(o[1]) for o in outcomes],
    )


def gmm_wald(result: GmmResult) -> Tuple[np.ndarray, np.ndarray]:
    """Per-coordinate Wald z statistics and two-sided normal p-values."""
    se = np.sqrt(np.clip(np.diag(result.covariance), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, result.theta_hat.vector / se, np.inf)
    return z, 2.0 * scipy.stats.norm.sf(np.abs(z))
