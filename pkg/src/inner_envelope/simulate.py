"""
Seeded data generators with their true subspaces, plus empirical checks of
the conditional-independence structure.
"""

import logging
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.stats
from scipy.spatial.distance import cdist

from .dataset import Dataset
from .errors import DataError, DimensionError
from .subspace import Basis, InnerEnvelopeBases, orth_complement, projection

logger = logging.getLogger(__name__)

SCENARIOS = (
    "linear_normal",
    "nonlinear_t",
    "sec3_linear",
    "sec3_nonlinear_mean",
    "sec3_heteroskedastic",
    "iris_synthetic",
)
IRIS_RESPONSES = ("sepal_length", "sepal_width", "petal_length", "petal_width")
DCOR_MAX_ROWS = 2000
CONDITION_TOL = 0.05

# Four-response design: S1 is the diagonal, S2 sits inside its complement.
GAMMA = np.full((4, 1), 0.5)
GAMMA0 = np.array(
    [
        [1 / 2, 1 / 2, 1 / 2],
        [-5 / 6, 1 / 6, 1 / 6],
        [1 / 6, -5 / 6, 1 / 6],
        [1 / 6, 1 / 6, -5 / 6],
    ]
)
B_TRUE = np.array([[1.0], [2.0], [3.0]]) / np.sqrt(14.0)


@dataclass(frozen=True)
class Scenario:
    """Generator choice; iris_synthetic always has the 150 iris rows."""

    kind: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise DataError(f"Unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.n < 1:
            raise DataError(f"n must be >= 1, got {self.n}")


@dataclass(frozen=True)
class GeneratedData:
    X: np.ndarray
    Y: np.ndarray
    truth: Optional[InnerEnvelopeBases]
    scenario: Scenario
    beta_true: Optional[np.ndarray] = None
    noise_basis: Optional[Basis] = None
    labels: Optional[np.ndarray] = None

    @property
    def dataset(self) -> Dataset:
        return Dataset.from_arrays(self.X, self.Y)


@dataclass(frozen=True)
class ConditionReport:
    """
    Empirical checks of the independence structure at the truth.

    Correlations are the largest absolute sample correlations between
    B0'Gamma0'Y and X, and between B0'Gamma0'Y and Gamma'Y.
    """

    corr_s3_x: float
    corr_s3_s1: float
    dcor_s3_x: float
    dcor_s3_s1: float
    residual_normality_pvalue: float
    n: int

    @property
    def passes(self) -> bool:
        return self.corr_s3_x < CONDITION_TOL and self.corr_s3_s1 < CONDITION_TOL

    def to_dict(self) -> dict:
        return {
            "corr_s3_x": self.corr_s3_x,
            "corr_s3_s1": self.corr_s3_s1,
            "dcor_s3_x": self.dcor_s3_x,
            "dcor_s3_s1": self.dcor_s3_s1,
            "residual_normality_pvalue": self.residual_normality_pvalue,
            "n": self.n,
            "passes": self.passes,
        }


def design_truth() -> InnerEnvelopeBases:
    """True bases of the four-response simulation design."""
    B = Basis(B_TRUE)
    return InnerEnvelopeBases(Basis(GAMMA), Basis(GAMMA0), B, orth_complement(B))


def sec3_truth() -> InnerEnvelopeBases:
    """S1 = e1, S2 = (0, 1, 2)/sqrt(5), S3 = (0, 2, -1)/sqrt(5)."""
    s1 = Basis(np.array([[1.0], [0.0], [0.0]]))
    s2 = Basis(np.array([[0.0], [1.0], [2.0]]) / np.sqrt(5.0))
    return InnerEnvelopeBases.from_subspaces(s1, s2)


def t5_sample(dim: int, scale, seed, size: Optional[int] = None) -> np.ndarray:
    """
    Multivariate t draws with 5 degrees of freedom and covariance scale.

    Args:
        dim: Dimension
        scale: Covariance (scalar times identity, or dim x dim)
        seed: Seed or numpy Generator
        size: Number of draws; None for a single vector

    Returns:
        (size, dim) matrix, or a (dim,) vector when size is None
    """
    cov = np.asarray(scale, dtype=float)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(dim)
    if cov.shape != (dim, dim):
        raise DimensionError(f"scale must be scalar or {dim}x{dim}, got shape {cov.shape}")
    df = 5
    dist = scipy.stats.multivariate_t(loc=np.zeros(dim), shape=cov * (df - 2) / df, df=df)
    rng = np.random.default_rng(seed)
    draws = np.reshape(dist.rvs(size=1 if size is None else size, random_state=rng), (-1, dim))
    return draws[0] if size is None else draws


def _design(X: np.ndarray, f1: np.ndarray, f2: np.ndarray, eps1: np.ndarray, eps2: np.ndarray, coupling: float):
    truth = design_truth()
    G, G0, B, B0 = truth.Gamma.mat, truth.Gamma0.mat, truth.B.mat, truth.B0.mat
    mixing = G0 @ (B @ np.full((1, 2), coupling) + B0)
    Y = np.outer(f1, G[:, 0]) + np.outer(f2, (G0 @ B)[:, 0]) + np.outer(eps1, G[:, 0]) + eps2 @ mixing.T
    return Y, truth


def _linear_normal(scenario: Scenario) -> GeneratedData:
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n
    X = rng.uniform(-5.0, 5.0, size=(n, 2))
    eps1 = rng.standard_normal(n)
    eps2 = 10.0 * rng.standard_normal((n, 2))
    Y, truth = _design(X, X[:, 0], X[:, 0] + X[:, 1], eps1, eps2, 0.2)
    s2 = truth.S2.mat
    beta = truth.Gamma.mat @ np.array([[1.0, 0.0]]) + s2 @ np.array([[1.0, 1.0]])
    return GeneratedData(X, Y, truth, scenario, beta_true=beta)


def _nonlinear_t(scenario: Scenario) -> GeneratedData:
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n
    X = rng.uniform(-5.0, 5.0, size=(n, 2))
    eps1 = t5_sample(1, 1.0, rng, n)[:, 0]
    eps2 = t5_sample(2, 100.0, rng, n)
    f1 = X[:, 0] ** 2 * np.sign(X[:, 1])
    f2 = 20.0 * np.sin(0.5 * (X[:, 0] + X[:, 1]))
    Y, truth = _design(X, f1, f2, eps1, eps2, 0.1)
    return GeneratedData(X, Y, truth, scenario)


def _sec3(scenario: Scenario) -> GeneratedData:
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n
    X = rng.standard_normal((n, 2))
    eps = rng.standard_normal((n, 3))
    x1, x2 = X[:, 0], X[:, 1]
    first = x1 if scenario.kind == "sec3_linear" else x1**2
    third = x2 * eps[:, 2] if scenario.kind == "sec3_heteroskedastic" else 2.0 * x2 + eps[:, 2]
    Y = np.column_stack([first + eps[:, 0], x2 + eps[:, 1], third])
    beta = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]]) if scenario.kind == "sec3_linear" else None
    return GeneratedData(X, Y, sec3_truth(), scenario, beta_true=beta)


def load_iris() -> pd.DataFrame:
    """The bundled 150-row iris table."""
    with resources.files("inner_envelope").joinpath("data/iris.csv").open("r") as fh:
        return pd.read_csv(fh)


def _iris_synthetic(scenario: Scenario) -> GeneratedData:
    frame = load_iris()
    rng = np.random.default_rng(scenario.seed)
    flowers = frame[list(IRIS_RESPONSES)].to_numpy(dtype=float)
    flowers = (flowers - flowers.mean(axis=0)) / flowers.std(axis=0, ddof=1)
    noise = rng.standard_normal((flowers.shape[0], 2))
    Y = np.hstack([noise, flowers])
    species = frame["species"].to_numpy()
    X = np.column_stack([(species == "versicolor").astype(float), (species == "virginica").astype(float)])
    if scenario.n != flowers.shape[0]:
        logger.info("iris_synthetic ignores n=%d and uses all %d rows", scenario.n, flowers.shape[0])
    noise_basis = Basis(np.eye(Y.shape[1])[:, :2])
    return GeneratedData(X, Y, None, scenario, noise_basis=noise_basis, labels=species)


_GENERATORS: Dict[str, Callable[[Scenario], GeneratedData]] = {
    "linear_normal": _linear_normal,
    "nonlinear_t": _nonlinear_t,
    "sec3_linear": _sec3,
    "sec3_nonlinear_mean": _sec3,
    "sec3_heteroskedastic": _sec3,
    "iris_synthetic": _iris_synthetic,
}


def generate(scenario: Scenario) -> GeneratedData:
    """Draw a dataset; identical scenarios give bit-identical data."""
    data = _GENERATORS[scenario.kind](scenario)
    logger.debug("Generated %s: n=%d, r=%d", scenario.kind, data.X.shape[0], data.Y.shape[1])
    return data


def distance_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """
    Bias-corrected distance correlation from U-centred distance matrices.

    Near 0 under independence; may be slightly negative.

    Raises:
        DataError: Fewer than four rows
    """
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    n = a.shape[0]
    if n < 4 or b.shape[0] != n:
        raise DataError(f"distance_correlation needs >= 4 paired rows, got {n} and {b.shape[0]}")

    def u_centred(points: np.ndarray) -> np.ndarray:
        dist = cdist(points, points)
        rows = dist.sum(axis=1) / (n - 2)
        total = dist.sum() / ((n - 1) * (n - 2))
        centred = dist - rows[:, None] - rows[None, :] + total
        np.fill_diagonal(centred, 0.0)
        return centred

    A, Bm = u_centred(a), u_centred(b)
    ab, aa, bb = np.sum(A * Bm), np.sum(A * A), np.sum(Bm * Bm)
    if aa <= 0 or bb <= 0:
        return 0.0
    return float(ab / np.sqrt(aa * bb))


def _max_abs_corr(a: np.ndarray, b: np.ndarray) -> float:
    k = a.shape[1]
    corr = np.corrcoef(a, b, rowvar=False)[:k, k:]
    return float(np.nanmax(np.abs(corr)))


def verify_conditions(data: GeneratedData, n_large: Optional[int] = None, seed: int = 0) -> ConditionReport:
    """
    Check the independence structure at the true bases.

    Args:
        data: Generated data with truth
        n_large: Regenerate the scenario at this size first
        seed: Seed for subsampling the distance-correlation check

    Returns:
        ConditionReport; passes requires both correlations below 0.05
    """
    if data.truth is None:
        raise DataError(f"Scenario {data.scenario.kind} has no true bases")
    if n_large is not None:
        data = generate(Scenario(data.scenario.kind, n_large, data.scenario.seed))
    truth = data.truth
    X, Y = data.X, data.Y
    s3 = Y @ truth.S3.mat
    s1 = Y @ truth.Gamma.mat
    rows = np.arange(X.shape[0])
    if rows.size > DCOR_MAX_ROWS:
        rows = np.sort(np.random.default_rng(seed).choice(rows, DCOR_MAX_ROWS, replace=False))
    ds = Dataset.from_arrays(X, Y)
    beta_t = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0]
    resid = ds.Y - ds.X @ beta_t
    pvalue = float(min(scipy.stats.normaltest(resid[:, j]).pvalue for j in range(resid.shape[1])))
    return ConditionReport(
        corr_s3_x=_max_abs_corr(s3, X),
        corr_s3_s1=_max_abs_corr(s3, s1),
        dcor_s3_x=distance_correlation(s3[rows], X[rows]),
        dcor_s3_s1=distance_correlation(s3[rows], s1[rows]),
        residual_normality_pvalue=pvalue,
        n=X.shape[0],
    )


def noise_containment(bases: InnerEnvelopeBases, noise_basis: Basis) -> Tuple[float, float]:
    """
    How much of a known noise subspace S0 the estimated S3 absorbs.

    Returns:
        (dist_in, dist_out): sqrt(2) times the Frobenius norms of the parts of
        P_S0 outside and inside the estimated S3. A 2-dimensional S0 fully
        inside gives (0, 2); fully outside gives (2, 0).
    """
    P0 = projection(noise_basis)
    P3 = projection(bases.S3)
    dist_in = np.sqrt(2.0) * np.linalg.norm((np.eye(P3.shape[0]) - P3) @ P0, "fro")
    dist_out = np.sqrt(2.0) * np.linalg.norm(P3 @ P0, "fro")
    return float(dist_in), float(dist_out)


def species_ks(data: GeneratedData, bases: InnerEnvelopeBases) -> pd.DataFrame:
    """
    Two-sample KS tests between every pair of label groups on each S3 coordinate.

    Returns:
        DataFrame with columns coordinate, group_a, group_b, statistic, pvalue
    """
    if data.labels is None:
        raise DataError(f"Scenario {data.scenario.kind} has no group labels")
    coords = (data.Y - data.Y.mean(axis=0)) @ bases.S3.mat
    groups = sorted(pd.unique(data.labels))
    records = []
    for j in range(coords.shape[1]):
        for i, a in enumerate(groups):
            for b in groups[i + 1:]:
                result = scipy.stats.ks_2samp(coords[data.labels == a, j], coords[data.labels == b, j])
                records.append(
                    {
                        "coordinate": j + 1,
                        "group_a": a,
                        "group_b": b,
                        "statistic": float(result.statistic),
                        "pvalue": float(result.pvalue),
                    }
                )
    return pd.DataFrame.from_records(records)


def population_covariances(kind: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact (Cov(Y), Cov(Y, X), Cov(X)) of the three-response scenarios.

    Raises:
        DataError: For scenarios without closed-form covariances
    """
    cov_x = np.eye(2)
    if kind == "sec3_linear":
        cov_yx = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
        noise = np.eye(3)
    elif kind == "sec3_nonlinear_mean":
        # Var(X1^2) = 2 and Cov(X1^2, X) = 0 for standard normal X.
        cov_yx = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
        noise = np.diag([3.0, 1.0, 1.0])
    elif kind == "sec3_heteroskedastic":
        cov_yx = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        noise = np.diag([3.0, 1.0, 1.0])
    else:
        raise DataError(f"No closed-form covariances for scenario {kind!r}")
    return cov_yx @ cov_yx.T + noise, cov_yx, cov_x
