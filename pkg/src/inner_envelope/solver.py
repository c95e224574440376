"""
Estimating-equation solvers for the globally and locally efficient fits.

Both fits alternate between re-estimating nuisances at the current theta and
solving the mean-score equation with those nuisances held fixed; bases,
Jacobians and the working model follow theta inside the inner solve.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import root

from .config import resolve_kernel
from .dataset import Dataset
from .errors import (
    ConvergenceWarning,
    DataError,
    DimensionError,
    SingularBlockError,
    SmallSampleWarning,
)
from .kernel import KernelSpec
from .moments import GmmResult, MomentConfig, fit_gmm, heuristic_theta
from .regression import (
    BetaEstimate,
    beta_from_bases,
    fit_envelope_baseline,
    fit_ols,
    fit_parametric_inner_envelope,
    fit_response_pls,
)
from .scores import (
    GradientCallback,
    NuisanceEstimates,
    SmootherPlan,
    as_plan,
    conditional_expectations,
    efficient_score_global,
    estimate_delta1,
    fit_normal_working,
    global_nuisances,
    local_nuisances,
    local_sandwich,
    robust_score,
    select_bandwidths,
    working_gradients,
)
from .subspace import (
    InnerEnvelopeBases,
    Theta,
    bases_to_theta,
    check_dims,
    finite_difference_jacobian,
    theta_to_bases,
)

logger = logging.getLogger(__name__)

METHODS = ("ols", "pls", "envelope", "innenv", "gmm", "global", "local", "oracle")
WORKING_MODELS = ("normal", "custom")
MAX_HALVINGS = 2
MONOTONE_SLACK = 1e-12
FAILED_RESIDUAL = 1e6

KernelConfig = Optional[Union[str, KernelSpec, SmootherPlan]]
ScoreFn = Callable[[Theta], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    """
    Outer and inner solver settings.

    MINPACK's Levenberg-Marquardt has no damping seed, so lm_lambda0 sets its
    initial step bound instead: heavier damping means a shorter first step.
    """

    delta: float = 1e-6
    max_outer: int = 100
    max_inner: int = 200
    lm_lambda0: float = 1e-3
    starts: int = 8
    seed: int = 0
    leave_one_out: bool = False
    jobs: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DataError(f"delta must be in (0, 1), got {self.delta}")
        for name in ("max_outer", "max_inner", "starts"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lm_lambda0 > 0:
            raise DataError(f"lm_lambda0 must be positive, got {self.lm_lambda0}")

    @property
    def step_bound(self) -> float:
        return float(np.clip(0.1 / self.lm_lambda0, 0.1, 100.0))


@dataclass(frozen=True)
class FitResult:
    """
    Outcome of an alternating fit.

    theta_hat charts the responses in the order given by permutation (when
    set); bases are always expressed in the caller's original order.
    """

    theta_hat: Theta
    bases: InnerEnvelopeBases
    method: str
    iterations: int
    score_norm: float
    converged: bool
    trajectory: List[Tuple[int, float, float]] = field(default_factory=list)
    permutation: Optional[List[int]] = None
    initial_score_norm: float = float("nan")
    covariance: Optional[np.ndarray] = None
    plan: Optional[SmootherPlan] = None


@dataclass(frozen=True)
class MethodFit:
    """Uniform result of any estimation method."""

    method: str
    beta: BetaEstimate
    bases: Optional[InnerEnvelopeBases] = None
    fit: Optional[FitResult] = None
    gmm: Optional[GmmResult] = None

    @property
    def converged(self) -> bool:
        if self.fit is not None:
            return self.fit.converged
        if self.gmm is not None:
            return self.gmm.converged
        return True


def _mean_norm(scores: np.ndarray) -> float:
    return float(np.linalg.norm(scores.mean(axis=0)))


def solve_mean_score(score_fn: ScoreFn, theta0: Theta, cfg: Optional[SolverConfig] = None) -> Tuple[Theta, float, bool]:
    """
    Root of the mean score by Levenberg-Marquardt with a finite-difference Jacobian.

    Args:
        score_fn: Map from theta to per-sample scores (n x q)
        theta0: Starting point
        cfg: Solver settings

    Returns:
        (theta, norm of the mean score there, converged); theta0 itself when
        its mean score is already below 1e-6 * sqrt(q) or the solve made it worse
    """
    cfg = cfg or SolverConfig()
    r, u, d, q = theta0.r, theta0.u, theta0.d, theta0.q
    tol = 1e-6 * np.sqrt(q)

    def mean_score(vec: np.ndarray) -> np.ndarray:
        try:
            m = score_fn(Theta.from_vector(vec, r, u, d)).mean(axis=0)
        except (DimensionError, np.linalg.LinAlgError):
            return np.full(q, FAILED_RESIDUAL)
        return m if np.all(np.isfinite(m)) else np.full(q, FAILED_RESIDUAL)

    x0 = theta0.vector
    norm0 = float(np.linalg.norm(mean_score(x0)))
    if norm0 < tol:
        return theta0, norm0, True
    sol = root(
        mean_score,
        x0,
        method="lm",
        options={"xtol": cfg.delta, "ftol": 1e-14, "maxiter": cfg.max_inner * (q + 1), "factor": cfg.step_bound},
    )
    x = np.asarray(sol.x, dtype=float)
    norm = float(np.linalg.norm(mean_score(x))) if np.all(np.isfinite(x)) else np.inf
    if not norm <= norm0:
        logger.debug("Inner solve did not improve the mean score (%.3g -> %.3g)", norm0, norm)
        return theta0, norm0, False
    return Theta.from_vector(x, r, u, d), norm, bool(norm < tol or sol.success)


def _initial_theta(
    dataset: Dataset,
    u: int,
    d: int,
    cfg: SolverConfig,
    init: Optional[InnerEnvelopeBases],
) -> Tuple[Dataset, Theta, Optional[List[int]]]:
    """Starting theta, reordering responses when the starting S1 cannot be charted."""
    try:
        if init is not None:
            return dataset, bases_to_theta(init), None
        heuristic_theta(dataset, u, d)
        return dataset, _gmm_theta(dataset, u, d, cfg), None
    except SingularBlockError as e:
        # A permutation of length r - u comes from the S2 chart; reordering responses cannot fix it.
        if len(e.permutation) != dataset.r:
            if init is not None:
                raise
            return dataset, _gmm_theta(dataset, u, d, cfg), None
        perm = e.permutation
    logger.info("Reordering responses as %s so the S1 chart applies", perm)
    dataset = dataset.permute_responses(perm)
    if init is not None:
        return dataset, bases_to_theta(init.permute_rows(perm)), perm
    return dataset, _gmm_theta(dataset, u, d, cfg), perm


def _gmm_theta(dataset: Dataset, u: int, d: int, cfg: SolverConfig) -> Theta:
    gmm = fit_gmm(dataset, u, d, MomentConfig(), starts=cfg.starts, seed=cfg.seed, jobs=cfg.jobs)
    logger.info("GMM initial value: objective %.3g (converged=%s)", gmm.objective_value, gmm.converged)
    return gmm.theta_hat


def _prepare(dataset: Dataset, u: int, d: int, kernel_cfg: KernelConfig, cfg: SolverConfig, init):
    check_dims(dataset.r, u, d)
    q = (dataset.r - u) * u + (dataset.r - u - d) * d
    if dataset.n < 10 * q:
        warnings.warn(f"n = {dataset.n} is below 10 * q = {10 * q}; estimates may be unstable", SmallSampleWarning)
    work, theta0, perm = _initial_theta(dataset, u, d, cfg, init)
    if kernel_cfg is None or isinstance(kernel_cfg, str):
        plan = select_bandwidths(work, theta0, resolve_kernel(kernel_cfg))
    else:
        plan = as_plan(kernel_cfg)
    return work, theta0, perm, plan


def _alternate(
    dataset: Dataset,
    theta0: Theta,
    build: Callable[[Theta], NuisanceEstimates],
    make_score: Callable[[NuisanceEstimates], ScoreFn],
    cfg: SolverConfig,
    method: str,
) -> Tuple[Theta, int, float, float, bool, list, np.ndarray]:
    r, u, d, q = theta0.r, theta0.u, theta0.d, theta0.q
    theta = theta0
    nuis = build(theta)
    norm = _mean_norm(make_score(nuis)(theta))
    initial = norm
    trajectory = [(0, 0.0, norm)]
    converged = False
    iterations = 0
    for it in range(1, cfg.max_outer + 1):
        proposal, _, _ = solve_mean_score(make_score(nuis), theta, cfg)
        step = proposal.vector - theta.vector
        accepted = None
        for halving in range(MAX_HALVINGS + 1):
            candidate = Theta.from_vector(theta.vector + step / 2**halving, r, u, d)
            cand_nuis = build(candidate)
            cand_norm = _mean_norm(make_score(cand_nuis)(candidate))
            if cand_norm <= norm + MONOTONE_SLACK:
                accepted = (candidate, cand_nuis, cand_norm)
                break
        iterations = it
        if accepted is None:
            logger.info("%s: outer step %d rejected after backtracking", method, it)
            converged = norm < 1e-6 * np.sqrt(q)
            break
        change = float(np.linalg.norm(accepted[0].vector - theta.vector))
        theta, nuis, norm = accepted
        trajectory.append((it, change, norm))
        logger.info("%s: iteration %d, |dtheta| = %.3g, |mean score| = %.3g", method, it, change, norm)
        if change <= cfg.delta:
            converged = True
            break
    if not converged:
        warnings.warn(f"{method} fit stopped after {iterations} outer iterations without converging", ConvergenceWarning)

    score_fn = make_score(nuis)
    scores = score_fn(theta)

    def mean_score(vec: np.ndarray) -> np.ndarray:
        return score_fn(Theta.from_vector(vec, r, u, d)).mean(axis=0)

    covariance = local_sandwich(scores, finite_difference_jacobian(mean_score, theta.vector))
    return theta, iterations, norm, initial, converged, trajectory, covariance


def _finish(
    method: str,
    perm: Optional[List[int]],
    plan: SmootherPlan,
    outcome,
) -> FitResult:
    theta, iterations, norm, initial, converged, trajectory, covariance = outcome
    bases = theta_to_bases(theta)
    if perm is not None:
        inverse = list(np.argsort(perm))
        bases = bases.permute_rows(inverse)
    return FitResult(
        theta_hat=theta,
        bases=bases,
        method=method,
        iterations=iterations,
        score_norm=norm,
        converged=converged,
        trajectory=trajectory,
        permutation=perm,
        initial_score_norm=initial,
        covariance=covariance,
        plan=plan,
    )


def fit_global(
    dataset: Dataset,
    u: int,
    d: int,
    kernel_cfg: KernelConfig = None,
    cfg: Optional[SolverConfig] = None,
    init: Optional[InnerEnvelopeBases] = None,
) -> FitResult:
    """
    Globally efficient estimator: kernel nuisances in the efficient score.

    Args:
        dataset: Centered data
        u: dim(S1)
        d: dim(S2)
        kernel_cfg: Kernel for every smoother, a per-smoother plan, or a
            family name (None for the default family) for cross-validated
            bandwidths chosen at the starting theta
        cfg: Solver settings
        init: Starting bases; GMM is used when omitted

    Returns:
        FitResult; bases are in the caller's response order even when the
        responses were reordered internally
    """
    cfg = cfg or SolverConfig()
    work, theta0, perm, plan = _prepare(dataset, u, d, kernel_cfg, cfg, init)
    delta1 = estimate_delta1(work, plan, cfg.leave_one_out)

    def build(theta: Theta) -> NuisanceEstimates:
        return global_nuisances(work, theta, plan, delta1, cfg.leave_one_out)

    def make_score(nuis: NuisanceEstimates) -> ScoreFn:
        return lambda theta: efficient_score_global(theta, work, nuis)

    outcome = _alternate(work, theta0, build, make_score, cfg, "global")
    return _finish("global", perm, plan, outcome)


def fit_local(
    dataset: Dataset,
    u: int,
    d: int,
    kernel_cfg: KernelConfig = None,
    cfg: Optional[SolverConfig] = None,
    working: str = "normal",
    gradient_fn: Optional[GradientCallback] = None,
    shortcut: bool = True,
    init: Optional[InnerEnvelopeBases] = None,
) -> FitResult:
    """
    Locally efficient estimator from the robust score.

    Args:
        dataset: Centered data
        u: dim(S1)
        d: dim(S2)
        kernel_cfg: As for fit_global
        cfg: Solver settings
        working: 'normal' or 'custom'
        gradient_fn: Working-model gradients for 'custom', given bases and data
        shortcut: Under the normal model, use the closed form that needs no
            conditional-expectation smoothing
        init: Starting bases; GMM is used when omitted

    Raises:
        DataError: Unknown working model or a custom model without gradient_fn
    """
    if working not in WORKING_MODELS:
        raise DataError(f"Unknown working model {working!r}; expected one of {WORKING_MODELS}")
    if working == "custom" and gradient_fn is None:
        raise DataError("A custom working model needs gradient_fn")
    cfg = cfg or SolverConfig()
    work, theta0, perm, plan = _prepare(dataset, u, d, kernel_cfg, cfg, init)
    delta1 = estimate_delta1(work, plan, cfg.leave_one_out)
    closed_form = working == "normal" and shortcut

    def gradients_at(theta: Theta):
        if working == "custom":
            return gradient_fn(theta_to_bases(theta), work)
        return working_gradients(fit_normal_working(theta, work), theta, work)

    def build(theta: Theta) -> NuisanceEstimates:
        nuis = local_nuisances(work, theta, plan, delta1, cfg.leave_one_out)
        if closed_form:
            return nuis
        fields = gradients_at(theta)
        return nuis.with_gradients(fields).with_centering(conditional_expectations(fields, theta, work, plan))

    def make_score(nuis: NuisanceEstimates) -> ScoreFn:
        if closed_form:
            return lambda theta: robust_score(theta, work, fit_normal_working(theta, work), nuis)
        return lambda theta: robust_score(theta, work, None, nuis.with_gradients(gradients_at(theta)))

    outcome = _alternate(work, theta0, build, make_score, cfg, "local")
    return _finish("local", perm, plan, outcome)


def fit_method(
    dataset: Dataset,
    method: str,
    u: int,
    d: int,
    kernel_cfg: KernelConfig = None,
    cfg: Optional[SolverConfig] = None,
    truth: Optional[InnerEnvelopeBases] = None,
    moment_config: Optional[MomentConfig] = None,
) -> MethodFit:
    """
    Fit any supported method and return bases (where defined) and beta.

    Envelope and PLS baselines use u + d components.

    Raises:
        DataError: Unknown method, or 'oracle' without truth
        DimensionError: Infeasible (u, d) for the number of responses, for every method
    """
    if method not in METHODS:
        raise DataError(f"Unknown method {method!r}; expected one of {METHODS}")
    check_dims(dataset.r, u, d)
    cfg = cfg or SolverConfig()
    if method == "ols":
        return MethodFit(method, fit_ols(dataset))
    if method == "pls":
        return MethodFit(method, fit_response_pls(dataset, u + d))
    if method == "envelope":
        return MethodFit(method, fit_envelope_baseline(dataset, u + d, seed=cfg.seed))
    if method == "innenv":
        bases, beta = fit_parametric_inner_envelope(dataset, u, d, seed=cfg.seed)
        return MethodFit(method, beta, bases)
    if method == "oracle":
        if truth is None:
            raise DataError("The oracle method needs the true bases")
        return MethodFit(method, beta_from_bases(dataset, truth, "oracle"), truth)
    if method == "gmm":
        gmm = fit_gmm(dataset, u, d, moment_config, starts=cfg.starts, seed=cfg.seed, jobs=cfg.jobs)
        return MethodFit(method, beta_from_bases(dataset, gmm.bases, "gmm"), gmm.bases, gmm=gmm)
    fitter = fit_global if method == "global" else fit_local
    result = fitter(dataset, u, d, kernel_cfg, cfg)
    return MethodFit(method, beta_from_bases(dataset, result.bases, method), result.bases, fit=result)
