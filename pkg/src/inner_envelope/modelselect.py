"""Bootstrap dimension selection and bootstrap standard errors."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.stats

from .config import parallel_map
from .dataset import Dataset
from .errors import DimensionError, EstimationError, InnerEnvelopeError
from .solver import KernelConfig, MethodFit, SolverConfig, fit_method
from .subspace import InnerEnvelopeBases, vector_correlation

logger = logging.getLogger(__name__)

SELECTION_ESTIMATORS = ("gmm", "global", "local")
MIN_SELECTION_REPLICATES = 20
MAX_CELL_FAILURE = 0.5
MAX_BOOTSTRAP_FAILURE = 0.2


@dataclass(frozen=True)
class DimSelectionResult:
    u_hat: int
    d_hat: int
    criterion_table: Dict[Tuple[int, int], float]
    B: int
    seed: int
    per_bootstrap: Dict[Tuple[int, int], List[float]] = field(default_factory=dict)
    invalid_cells: List[Tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap SEs of beta (r x p), Wald p-values and the per-replicate archive."""

    se: np.ndarray
    beta_hat: np.ndarray
    p_values: np.ndarray
    archive: np.ndarray
    method: str
    n_failed: int
    B: int
    seed: int


def dimension_grid(r: int) -> List[Tuple[int, int]]:
    """All (u, d) with u >= 1, d >= 1 and u + d <= r - 1, u-major."""
    return [(u, d) for u in range(1, r - 1) for d in range(1, r - u)]


def _resample_streams(seed: int, B: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(B)


def _bootstrap_rows(stream: np.random.SeedSequence, n: int) -> np.ndarray:
    return np.random.default_rng(stream).integers(0, n, size=n)


def _subspace_triple(bases: InnerEnvelopeBases):
    return bases.S1, bases.S2, bases.S3


def select_dimension(
    dataset: Dataset,
    B: int = 50,
    seed: int = 0,
    estimator: str = "gmm",
    cfg: Optional[SolverConfig] = None,
    jobs: Optional[int] = None,
    kernel_cfg: KernelConfig = None,
) -> DimSelectionResult:
    """
    Choose (u, d) by bootstrap stability of the estimated subspaces.

    For each grid cell the criterion is the mean over replicates of
    q2(S1, S1b) + q2(S2, S2b) + q2(S3, S3b), comparing full-data and resampled
    estimates. Every cell sees the same resamples.

    Args:
        dataset: Centered data
        B: Bootstrap replicates (>= 20)
        seed: Master seed; replicate streams are spawned from it
        estimator: 'gmm', 'global' or 'local'
        cfg: Solver settings passed to every fit
        jobs: Worker count for replicates
        kernel_cfg: Kernel settings for the global and local estimators

    Returns:
        The maximizing cell; ties go to smaller u, then smaller d

    Raises:
        DimensionError: r < 3 (empty grid) or B < 20
        EstimationError: Every cell invalid
    """
    if estimator not in SELECTION_ESTIMATORS:
        raise DimensionError(f"Unknown selection estimator {estimator!r}; expected one of {SELECTION_ESTIMATORS}")
    if B < MIN_SELECTION_REPLICATES:
        raise DimensionError(f"Dimension selection needs B >= {MIN_SELECTION_REPLICATES}, got {B}")
    grid = dimension_grid(dataset.r)
    if not grid:
        raise DimensionError(f"No feasible (u, d) for r = {dataset.r}", {"r": dataset.r})
    cfg = cfg or SolverConfig(seed=seed)
    streams = _resample_streams(seed, B)
    table: Dict[Tuple[int, int], float] = {}
    records: Dict[Tuple[int, int], List[float]] = {}
    invalid: List[Tuple[int, int]] = []

    for u, d in grid:
        full = fit_method(dataset, estimator, u, d, kernel_cfg, cfg).bases
        reference = _subspace_triple(full)

        def replicate(stream: np.random.SeedSequence) -> Optional[float]:
            rows = _bootstrap_rows(stream, dataset.n)
            try:
                boot = fit_method(dataset.subset(rows), estimator, u, d, kernel_cfg, cfg).bases
            except (InnerEnvelopeError, np.linalg.LinAlgError) as e:
                logger.debug("Bootstrap fit failed for (u=%d, d=%d): %s", u, d, e)
                return None
            return float(sum(vector_correlation(a, b) for a, b in zip(reference, _subspace_triple(boot))))

        values = parallel_map(replicate, streams, jobs)
        ok = [v for v in values if v is not None]
        if len(ok) < (1.0 - MAX_CELL_FAILURE) * B:
            logger.warning("Cell (u=%d, d=%d) invalid: %d of %d fits failed", u, d, B - len(ok), B)
            invalid.append((u, d))
            continue
        records[(u, d)] = ok
        table[(u, d)] = float(np.mean(ok))
        logger.info("Cell (u=%d, d=%d): criterion %.4f", u, d, table[(u, d)])

    if not table:
        raise EstimationError("Every (u, d) cell failed", {"invalid_cells": [list(c) for c in invalid]})
    # Grid order is (u, d) ascending, and max keeps the first maximum.
    u_hat, d_hat = max(table, key=lambda cell: table[cell])
    logger.info("Selected u=%d, d=%d", u_hat, d_hat)
    return DimSelectionResult(u_hat, d_hat, table, B, seed, records, invalid)


def bootstrap_se(
    dataset: Dataset,
    u: int,
    d: int,
    method: str,
    B: int = 100,
    seed: int = 0,
    cfg: Optional[SolverConfig] = None,
    jobs: Optional[int] = None,
    truth: Optional[InnerEnvelopeBases] = None,
    kernel_cfg: KernelConfig = None,
) -> BootstrapResult:
    """
    Nonparametric bootstrap standard errors of the coefficient matrix.

    Failed replicates are dropped and counted.

    Raises:
        EstimationError: More than 20% of replicates failed, or fewer than two succeeded
    """
    cfg = cfg or SolverConfig(seed=seed)
    full = fit_method(dataset, method, u, d, kernel_cfg, cfg, truth)

    def replicate(stream: np.random.SeedSequence) -> Optional[np.ndarray]:
        rows = _bootstrap_rows(stream, dataset.n)
        try:
            fit: MethodFit = fit_method(dataset.subset(rows), method, u, d, kernel_cfg, cfg, truth)
        except (InnerEnvelopeError, np.linalg.LinAlgError) as e:
            logger.debug("Bootstrap replicate failed: %s", e)
            return None
        return fit.beta.beta

    values = parallel_map(replicate, _resample_streams(seed, B), jobs)
    ok = [v for v in values if v is not None]
    n_failed = B - len(ok)
    if n_failed > MAX_BOOTSTRAP_FAILURE * B or len(ok) < 2:
        raise EstimationError(
            f"{n_failed} of {B} bootstrap replicates failed", {"method": method, "failed": n_failed, "B": B}
        )
    if n_failed:
        logger.warning("%s bootstrap: dropped %d failed replicates", method, n_failed)
    archive = np.stack(ok)
    se = archive.std(axis=0, ddof=1)
    beta = full.beta.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.inf)
    p_values = 2.0 * scipy.stats.norm.sf(np.abs(z))
    return BootstrapResult(se, beta, p_values, archive, method, n_failed, B, seed)


def se_ratio_ecdf(se_num: np.ndarray, se_den: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sorted entrywise SE ratios and their empirical CDF heights.

    Entries with a zero denominator are dropped.
    """
    num = np.asarray(se_num, dtype=float).ravel()
    den = np.asarray(se_den, dtype=float).ravel()
    if num.shape != den.shape:
        raise DimensionError(f"SE tables differ in size: {num.size} vs {den.size}")
    keep = den > 0
    ratios = np.sort(num[keep] / den[keep])
    return ratios, np.arange(1, ratios.size + 1) / max(ratios.size, 1)
