"""
Nuisance estimation and the efficient and robust score functions.

Per-sample quantities are kept as rows: Delta1, Delta2 and projections of Y
are n x r, gradients of log densities are n x (block dim). A score row is the
column-major vectorization of a few outer products, contracted with the
basis Jacobians of Gamma, Gamma0 and B0.
"""

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .dataset import Dataset
from .errors import DimensionError, JitterWarning
from .kernel import KernelSpec, SmootherInput, cv_bandwidth, log_density_gradient, nw_regress
from .regression import compute_moments
from .subspace import InnerEnvelopeBases, Theta, basis_jacobian, projection, theta_to_bases

logger = logging.getLogger(__name__)

JITTER_FACTOR = 1e-8
SMOOTHERS = ("delta1", "delta2", "eta1", "eta2", "eta3", "cond_exp")


@dataclass(frozen=True)
class SmootherPlan:
    """One bandwidth per smoother, chosen once and frozen for a fit."""

    family: str
    delta1: float
    delta2: float
    eta1: float
    eta2: float
    eta3: float
    cond_exp: float

    @classmethod
    def uniform(cls, spec: KernelSpec) -> "SmootherPlan":
        h = spec.bandwidth
        return cls(spec.family, h, h, h, h, h, h)

    def spec(self, smoother: str) -> KernelSpec:
        if smoother not in SMOOTHERS:
            raise ValueError(f"Unknown smoother {smoother!r}")
        return KernelSpec(self.family, getattr(self, smoother))

    def to_dict(self) -> dict:
        return {"family": self.family, **{name: getattr(self, name) for name in SMOOTHERS}}


def as_plan(spec: Union[KernelSpec, SmootherPlan]) -> SmootherPlan:
    return spec if isinstance(spec, SmootherPlan) else SmootherPlan.uniform(spec)


@dataclass(frozen=True)
class GradientFields:
    """Log-density gradients per sample: eta1 (n x u), eta2_B (n x d), eta2_B0 and eta3 (n x (r-u-d))."""

    eta1: np.ndarray
    eta2_B: np.ndarray
    eta2_B0: np.ndarray
    eta3: np.ndarray


@dataclass(frozen=True)
class Centering:
    """Conditional expectations of the working gradients; eta3 is centred by its plain mean."""

    eta1: np.ndarray
    eta2_B: np.ndarray
    eta2_B0: np.ndarray
    eta3_mean: np.ndarray


GradientCallback = Callable[[InnerEnvelopeBases, Dataset], GradientFields]


@dataclass(frozen=True)
class NuisanceEstimates:
    delta1: np.ndarray
    delta2: np.ndarray
    cond_mean_s2: np.ndarray
    grad_log_eta1: Optional[np.ndarray] = None
    grad_log_eta2_B: Optional[np.ndarray] = None
    grad_log_eta2_B0: Optional[np.ndarray] = None
    grad_log_eta3: Optional[np.ndarray] = None
    cond_exp_eta1: Optional[np.ndarray] = None
    cond_exp_eta2_B: Optional[np.ndarray] = None
    cond_exp_eta2_B0: Optional[np.ndarray] = None
    mean_grad_eta3: Optional[np.ndarray] = None

    @property
    def gradients(self) -> Optional[GradientFields]:
        if self.grad_log_eta1 is None:
            return None
        return GradientFields(self.grad_log_eta1, self.grad_log_eta2_B, self.grad_log_eta2_B0, self.grad_log_eta3)

    @property
    def centering(self) -> Optional[Centering]:
        if self.cond_exp_eta1 is None:
            return None
        return Centering(self.cond_exp_eta1, self.cond_exp_eta2_B, self.cond_exp_eta2_B0, self.mean_grad_eta3)

    def with_gradients(self, fields: GradientFields) -> "NuisanceEstimates":
        return replace(
            self,
            grad_log_eta1=fields.eta1,
            grad_log_eta2_B=fields.eta2_B,
            grad_log_eta2_B0=fields.eta2_B0,
            grad_log_eta3=fields.eta3,
        )

    def with_centering(self, centering: Centering) -> "NuisanceEstimates":
        return replace(
            self,
            cond_exp_eta1=centering.eta1,
            cond_exp_eta2_B=centering.eta2_B,
            cond_exp_eta2_B0=centering.eta2_B0,
            mean_grad_eta3=centering.eta3_mean,
        )


@dataclass(frozen=True)
class NormalWorkingModel:
    zeta1: np.ndarray
    zeta2: np.ndarray
    Omega: np.ndarray
    Omega0: np.ndarray
    mu2: np.ndarray
    Sigma2: np.ndarray


def _coordinates(bases: InnerEnvelopeBases, Y: np.ndarray):
    """Per-sample (Gamma'Y, B'Gamma0'Y, B0'Gamma0'Y) as row blocks."""
    y0 = Y @ bases.Gamma0.mat
    return Y @ bases.Gamma.mat, y0 @ bases.B.mat, y0 @ bases.B0.mat


def select_bandwidths(dataset: Dataset, theta: Theta, family: str = "biweight") -> SmootherPlan:
    """
    Cross-validated bandwidth for every smoother at theta.

    Regression smoothers use leave-one-out CV on their own responses, density
    smoothers use least-squares CV on their joint coordinates.
    """
    bases = theta_to_bases(theta)
    X, Y = dataset.X, dataset.Y
    t1, t2, c = _coordinates(bases, Y)
    cx = np.hstack([c, X])
    plan = SmootherPlan(
        family=family,
        delta1=cv_bandwidth(SmootherInput.from_points(X, Y), "regression", family),
        delta2=cv_bandwidth(SmootherInput.from_points(cx, Y @ projection(bases.S2)), "regression", family),
        eta1=cv_bandwidth(SmootherInput.from_points(np.hstack([t1, X])), "density", family),
        eta2=cv_bandwidth(SmootherInput.from_points(np.hstack([t2, cx])), "density", family),
        eta3=cv_bandwidth(SmootherInput.from_points(c), "density", family),
        cond_exp=cv_bandwidth(SmootherInput.from_points(cx, t2), "regression", family),
    )
    logger.info("Selected bandwidths: %s", plan.to_dict())
    return plan


def estimate_delta1(dataset: Dataset, spec: Union[KernelSpec, SmootherPlan], leave_one_out: bool = False) -> np.ndarray:
    """Y minus its Nadaraya-Watson regression on X, per sample."""
    inp = SmootherInput.from_points(dataset.X, dataset.Y)
    return dataset.Y - nw_regress(inp, None, as_plan(spec).spec("delta1"), leave_one_out=leave_one_out)


def _delta2_parts(dataset: Dataset, bases: InnerEnvelopeBases, spec: KernelSpec, leave_one_out: bool):
    P = projection(bases.S2)
    target = dataset.Y @ P
    c = dataset.Y @ bases.Gamma0.mat @ bases.B0.mat
    joint = nw_regress(SmootherInput.from_points(np.hstack([c, dataset.X]), target), None, spec, leave_one_out=leave_one_out)
    marginal = nw_regress(SmootherInput.from_points(c, target), None, spec, leave_one_out=leave_one_out)
    # Rows of target lie in span(Gamma0 B); projecting again removes drift from rounding.
    return (joint - marginal) @ P, joint @ P


def estimate_delta2(
    dataset: Dataset,
    theta: Theta,
    spec: Union[KernelSpec, SmootherPlan],
    leave_one_out: bool = False,
) -> np.ndarray:
    """
    P_{Gamma0 B}[E(Y | B0'Gamma0'Y, X) - E(Y | B0'Gamma0'Y)] per sample.

    Returns:
        n x r matrix whose rows lie in span(Gamma0 B)
    """
    delta2, _ = _delta2_parts(dataset, theta_to_bases(theta), as_plan(spec).spec("delta2"), leave_one_out)
    return delta2


def local_nuisances(
    dataset: Dataset,
    theta: Theta,
    spec: Union[KernelSpec, SmootherPlan],
    delta1: Optional[np.ndarray] = None,
    leave_one_out: bool = False,
) -> NuisanceEstimates:
    """Delta1, Delta2 and the conditional mean of the S2 projection; no gradients."""
    plan = as_plan(spec)
    if delta1 is None:
        delta1 = estimate_delta1(dataset, plan, leave_one_out)
    delta2, cond_mean_s2 = _delta2_parts(dataset, theta_to_bases(theta), plan.spec("delta2"), leave_one_out)
    return NuisanceEstimates(delta1=delta1, delta2=delta2, cond_mean_s2=cond_mean_s2)


def kernel_gradients(dataset: Dataset, theta: Theta, spec: Union[KernelSpec, SmootherPlan]) -> GradientFields:
    """Kernel estimates of the four log-density gradients at the sample."""
    plan = as_plan(spec)
    bases = theta_to_bases(theta)
    X = dataset.X
    t1, t2, c = _coordinates(bases, dataset.Y)
    eta2 = plan.spec("eta2")
    g1 = log_density_gradient(SmootherInput.from_points(t1), X, None, plan.spec("eta1"))
    g2b = log_density_gradient(SmootherInput.from_points(t2), np.hstack([c, X]), None, eta2)
    # d/dc log f(t2 | c, X) = d/dc log f(c, t2, X) - d/dc log f(c, X)
    g2b0 = log_density_gradient(SmootherInput.from_points(c), np.hstack([t2, X]), None, eta2) - log_density_gradient(
        SmootherInput.from_points(c), X, None, eta2
    )
    g3 = log_density_gradient(SmootherInput.from_points(c), None, None, plan.spec("eta3"))
    return GradientFields(g1, g2b, g2b0, g3)


def global_nuisances(
    dataset: Dataset,
    theta: Theta,
    spec: Union[KernelSpec, SmootherPlan],
    delta1: Optional[np.ndarray] = None,
    leave_one_out: bool = False,
) -> NuisanceEstimates:
    """
    All nuisances of the globally efficient score at theta.

    Args:
        dataset: Centered data
        theta: Current parameter
        spec: One kernel for every smoother, or a per-smoother plan
        delta1: Precomputed Delta1 (it does not depend on theta)
        leave_one_out: Drop each sample's own weight in the regressions

    Returns:
        NuisanceEstimates with Delta1, Delta2 and the kernel gradients
    """
    nuis = local_nuisances(dataset, theta, spec, delta1, leave_one_out)
    return nuis.with_gradients(kernel_gradients(dataset, theta, spec))


def _vec_rows(mats: np.ndarray) -> np.ndarray:
    """Column-major vec of each n x a x b slice, giving n x (a*b)."""
    n = mats.shape[0]
    return mats.transpose(0, 2, 1).reshape(n, -1)


def _outer(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return np.einsum("ia,ib->iab", left, right)


def _assemble(
    theta: Theta,
    bases: InnerEnvelopeBases,
    Y: np.ndarray,
    delta1: np.ndarray,
    delta2: np.ndarray,
    fields: GradientFields,
) -> np.ndarray:
    n, r = Y.shape
    u, d = bases.u, bases.d
    n3 = r - u - d
    assert delta1.shape == (n, r) and delta2.shape == (n, r)
    assert fields.eta1.shape == (n, u) and fields.eta2_B.shape == (n, d)
    assert fields.eta2_B0.shape == (n, n3) and fields.eta3.shape == (n, n3)

    P = projection(bases.Gamma)
    Q = np.eye(r) - P
    B, B0 = bases.B.mat, bases.B0.mat
    m_gamma = _outer(delta1 @ Q, fields.eta1)
    m_gamma0 = _outer(Y @ P + delta2, fields.eta3 @ B0.T)
    m_gamma0 += _outer(delta1 @ P, fields.eta2_B @ B.T + fields.eta2_B0 @ B0.T)
    m_b0 = _outer(delta2 @ bases.Gamma0.mat, fields.eta3)

    score_gamma = _vec_rows(m_gamma) @ basis_jacobian(theta, "Gamma")
    score_gamma += _vec_rows(m_gamma0) @ basis_jacobian(theta, "Gamma0")
    score_b = _vec_rows(m_b0) @ basis_jacobian(theta, "B0")
    return np.hstack([score_gamma, score_b])


def efficient_score_global(theta: Theta, dataset: Dataset, nuis: NuisanceEstimates) -> np.ndarray:
    """
    Per-sample efficient score (n x q) from plug-in nuisances.

    The b block involves Delta2 and the eta3 gradient only.
    """
    fields = nuis.gradients
    if fields is None:
        raise ValueError("efficient_score_global needs gradient fields; use global_nuisances")
    return _assemble(theta, theta_to_bases(theta), dataset.Y, nuis.delta1, nuis.delta2, fields)


def _spd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = (mat + mat.T) / 2.0
    dim = mat.shape[0]
    if np.linalg.eigvalsh(mat).min() > 1e-12 * max(np.trace(mat) / dim, 1e-300):
        return mat
    jitter = JITTER_FACTOR * max(np.trace(mat) / dim, 1.0)
    warnings.warn(f"{name} is not positive definite; adding ridge {jitter:.3g}", JitterWarning)
    return mat + jitter * np.eye(dim)


def fit_normal_working(theta: Theta, dataset: Dataset) -> NormalWorkingModel:
    """
    Multivariate-normal working model at theta.

    Coefficients are OLS coordinates in the Gamma and Gamma0 B frames;
    covariances are residual second moments with denominator n. Sigma2 is the
    covariance of B'Gamma0'Y given B0'Gamma0'Y and X.
    """
    if dataset.n <= dataset.p:
        raise DimensionError(f"Need n > p for the working model, got n={dataset.n}, p={dataset.p}")
    bases = theta_to_bases(theta)
    moments = compute_moments(dataset)
    G, G0, B, B0 = bases.Gamma.mat, bases.Gamma0.mat, bases.B.mat, bases.B0.mat
    omega = _spd(G.T @ moments.S_res @ G, "Omega")
    omega0 = _spd(G0.T @ moments.S_res @ G0, "Omega0")
    m33 = B0.T @ omega0 @ B0
    mu2 = np.linalg.solve(m33, B0.T @ omega0 @ B)
    sigma2 = _spd(B.T @ omega0 @ B - B.T @ omega0 @ B0 @ mu2, "Sigma2")
    return NormalWorkingModel(
        zeta1=G.T @ moments.beta_ols,
        zeta2=B.T @ G0.T @ moments.beta_ols,
        Omega=omega,
        Omega0=omega0,
        mu2=mu2,
        Sigma2=sigma2,
    )


def _eta2_residual(wm: NormalWorkingModel, t2: np.ndarray, c: np.ndarray, X: np.ndarray) -> np.ndarray:
    return t2 - X @ wm.zeta2.T - c @ wm.mu2


def working_gradients(wm: NormalWorkingModel, theta: Theta, dataset: Dataset) -> GradientFields:
    """Closed-form log-density gradients of the normal working model."""
    bases = theta_to_bases(theta)
    X = dataset.X
    t1, t2, c = _coordinates(bases, dataset.Y)
    resid2 = np.linalg.solve(wm.Sigma2, _eta2_residual(wm, t2, c, X).T).T
    m33 = bases.B0.mat.T @ wm.Omega0 @ bases.B0.mat
    return GradientFields(
        eta1=-np.linalg.solve(wm.Omega, (t1 - X @ wm.zeta1.T).T).T,
        eta2_B=-resid2,
        eta2_B0=resid2 @ wm.mu2.T,
        eta3=-np.linalg.solve(m33, c.T).T,
    )


def conditional_expectations(
    gradients: GradientFields,
    theta: Theta,
    dataset: Dataset,
    spec: Union[KernelSpec, SmootherPlan],
) -> Centering:
    """
    Kernel regressions of the working gradients on their conditioning variables.

    eta1 is regressed on X, both eta2 partials on (B0'Gamma0'Y, X); eta3 is
    centred by its sample mean.
    """
    kspec = as_plan(spec).spec("cond_exp")
    bases = theta_to_bases(theta)
    X = dataset.X
    c = dataset.Y @ bases.Gamma0.mat @ bases.B0.mat
    ce1 = nw_regress(SmootherInput.from_points(X, gradients.eta1), None, kspec)
    d = gradients.eta2_B.shape[1]
    both = nw_regress(
        SmootherInput.from_points(np.hstack([c, X]), np.hstack([gradients.eta2_B, gradients.eta2_B0])), None, kspec
    )
    return Centering(ce1, both[:, :d], both[:, d:], gradients.eta3.mean(axis=0))


def normal_conditional_expectations(
    wm: NormalWorkingModel, theta: Theta, dataset: Dataset, nuis: NuisanceEstimates
) -> Centering:
    """
    Exact conditional expectations of the normal working gradients, with
    E(Y | X) = Y - Delta1 and E(B'Gamma0'Y | B0'Gamma0'Y, X) read off the
    Delta2 smoother.
    """
    bases = theta_to_bases(theta)
    X = dataset.X
    t1, _, c = _coordinates(bases, dataset.Y)
    mean_t1 = (dataset.Y - nuis.delta1) @ bases.Gamma.mat
    mean_t2 = nuis.cond_mean_s2 @ bases.Gamma0.mat @ bases.B.mat
    resid2 = np.linalg.solve(wm.Sigma2, _eta2_residual(wm, mean_t2, c, X).T).T
    m33 = bases.B0.mat.T @ wm.Omega0 @ bases.B0.mat
    return Centering(
        eta1=-np.linalg.solve(wm.Omega, (mean_t1 - X @ wm.zeta1.T).T).T,
        eta2_B=-resid2,
        eta2_B0=resid2 @ wm.mu2.T,
        eta3_mean=-np.linalg.solve(m33, c.mean(axis=0)),
    )


def _centred(fields: GradientFields, centering: Centering) -> GradientFields:
    return GradientFields(
        fields.eta1 - centering.eta1,
        fields.eta2_B - centering.eta2_B,
        fields.eta2_B0 - centering.eta2_B0,
        fields.eta3 - centering.eta3_mean,
    )


def robust_score(
    theta: Theta,
    dataset: Dataset,
    wm: Optional[NormalWorkingModel],
    nuis: NuisanceEstimates,
) -> np.ndarray:
    """
    Per-sample robust score (n x q).

    When nuis carries gradients and their conditional expectations, each
    gradient is centred before contraction. Otherwise wm must be the normal
    working model and the closed form is used: only Delta1, Delta2 and the
    Delta2 smoother's conditional mean enter.

    Raises:
        ValueError: Neither centering nor a normal working model is available
    """
    bases = theta_to_bases(theta)
    Y = dataset.Y
    centering = nuis.centering
    if centering is not None:
        fields = nuis.gradients
        if fields is None:
            raise ValueError("Centering supplied without gradient fields")
        return _assemble(theta, bases, Y, nuis.delta1, nuis.delta2, _centred(fields, centering))
    if wm is None:
        raise ValueError("robust_score needs a normal working model or conditional expectations")

    _, t2, c = _coordinates(bases, Y)
    m33 = bases.B0.mat.T @ wm.Omega0 @ bases.B0.mat
    resid2 = t2 - nuis.cond_mean_s2 @ bases.Gamma0.mat @ bases.B.mat
    eta2_b = -np.linalg.solve(wm.Sigma2, resid2.T).T
    fields = GradientFields(
        eta1=-np.linalg.solve(wm.Omega, (nuis.delta1 @ bases.Gamma.mat).T).T,
        eta2_B=eta2_b,
        eta2_B0=-eta2_b @ wm.mu2.T,
        eta3=-np.linalg.solve(m33, (c - c.mean(axis=0)).T).T,
    )
    return _assemble(theta, bases, Y, nuis.delta1, nuis.delta2, fields)


def local_sandwich(scores: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
    """
    Sandwich covariance C^-1 D C^-T / n of an estimating-equation root.

    Args:
        scores: n x q per-sample scores at the root
        jacobian: q x q derivative of the mean score

    Returns:
        q x q symmetric covariance
    """
    n = scores.shape[0]
    D = scores.T @ scores / n
    try:
        C_inv = np.linalg.inv(jacobian)
    except np.linalg.LinAlgError:
        logger.warning("Singular score Jacobian; using pseudo-inverse in the sandwich")
        C_inv = np.linalg.pinv(jacobian)
    cov = C_inv @ D @ C_inv.T / n
    return (cov + cov.T) / 2.0
