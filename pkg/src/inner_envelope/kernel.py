"""
Product-kernel smoothers: density, log-density gradient, Nadaraya-Watson
regression and cross-validated bandwidths.

Coordinates are standardized column by column to a common spread (the mean
column SD), so one bandwidth serves every coordinate and is expressed in the
data's own units.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import KERNEL_FAMILIES
from .errors import DataError, DimensionError, SmootherWarning

logger = logging.getLogger(__name__)

FLOOR_FACTOR = 1e-12
CV_GRID_SIZE = 20
CV_GRID_SPAN = 8.0
_CHUNK = 256


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and one common bandwidth."""

    family: str = "biweight"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise DataError(f"Unknown kernel family {self.family!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise DataError(f"Bandwidth must be positive and finite, got {self.bandwidth}")

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return KernelSpec(self.family, float(bandwidth))


@dataclass(frozen=True)
class SmootherInput:
    """Sample coordinates (and optional responses) with their standardization."""

    points: np.ndarray
    responses: Optional[np.ndarray]
    center: np.ndarray
    scale: np.ndarray
    standardized: bool

    @classmethod
    def from_points(
        cls,
        points: np.ndarray,
        responses: Optional[np.ndarray] = None,
        standardize: bool = True,
    ) -> "SmootherInput":
        """
        Build a smoother input.

        Args:
            points: n x dim sample coordinates (a 1-D array is one coordinate)
            responses: Optional n x m responses for regression
            standardize: Rescale columns to the mean column SD; requires n >= 2

        Raises:
            DataError: Non-finite entries, too few rows or zero-variance columns
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise DataError(f"points must be a non-empty n x dim matrix, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise DataError("points contain non-finite values")
        if responses is not None:
            responses = np.asarray(responses, dtype=float)
            if responses.ndim == 1:
                responses = responses[:, None]
            if responses.shape[0] != points.shape[0]:
                raise DimensionError("responses and points have different row counts")
            if not np.all(np.isfinite(responses)):
                raise DataError("responses contain non-finite values")
        dim = points.shape[1]
        if standardize:
            if points.shape[0] < 2:
                raise DataError("Standardization needs at least 2 points")
            sd = points.std(axis=0, ddof=1)
            if np.any(sd <= 0):
                raise DataError(
                    "Zero-variance coordinate columns", {"columns": np.flatnonzero(sd <= 0).tolist()}
                )
            center = points.mean(axis=0)
            scale = sd / sd.mean()
        else:
            center = np.zeros(dim)
            scale = np.ones(dim)
        return cls(points, responses, center, scale, standardize)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def z(self) -> np.ndarray:
        return self.transform(self.points)

    def transform(self, query: np.ndarray) -> np.ndarray:
        return (query - self.center) / self.scale

    def spread(self) -> float:
        """Mean column SD in original units."""
        if self.n < 2:
            return 1.0
        return float(self.points.std(axis=0, ddof=1).mean())


def kernel_eval(u, family: str = "biweight"):
    """K(u): biweight (15/16)(1-u^2)^2 or Epanechnikov 0.75(1-u^2) on |u| <= 1."""
    u = np.asarray(u, dtype=float)
    one_minus = 1.0 - u * u
    if family == "biweight":
        val = (15.0 / 16.0) * one_minus * one_minus
    elif family == "epanechnikov":
        val = 0.75 * one_minus
    else:
        raise DataError(f"Unknown kernel family {family!r}")
    return np.where(np.abs(u) <= 1.0, val, 0.0)[()]


def kernel_deriv(u, family: str = "biweight"):
    """K'(u); continuous at the support edge for the biweight only."""
    u = np.asarray(u, dtype=float)
    if family == "biweight":
        val = -(15.0 / 4.0) * u * (1.0 - u * u)
    elif family == "epanechnikov":
        val = -1.5 * u
    else:
        raise DataError(f"Unknown kernel family {family!r}")
    return np.where(np.abs(u) <= 1.0, val, 0.0)[()]


def kernel_self_convolution(u, family: str = "biweight"):
    """
    (K*K)(u), the density of the sum of two kernel draws.

    Biweight: (5/3584)(2-|u|)^5 (u^4 + 10|u|^3 + 36u^2 + 40|u| + 16).
    Epanechnikov: (3/160)(2-|u|)^3 (u^2 + 6|u| + 4). Both vanish for |u| > 2.
    """
    u = np.minimum(np.abs(np.asarray(u, dtype=float)), 2.0)
    rest = 2.0 - u
    if family == "biweight":
        val = (5.0 / 3584.0) * rest**5 * (u**4 + 10.0 * u**3 + 36.0 * u**2 + 40.0 * u + 16.0)
    elif family == "epanechnikov":
        val = (3.0 / 160.0) * rest**3 * (u**2 + 6.0 * u + 4.0)
    else:
        raise DataError(f"Unknown kernel family {family!r}")
    return val[()]


def _as_queries(inp: SmootherInput, query: Optional[np.ndarray]):
    """Standardized query matrix and whether a single point was given."""
    if query is None:
        return inp.z, False
    query = np.asarray(query, dtype=float)
    single = query.ndim == 1
    if single:
        query = query[None, :]
    if query.ndim != 2 or query.shape[1] != inp.dim:
        raise DimensionError(f"Query dimension {query.shape[-1]} does not match sample dimension {inp.dim}")
    return inp.transform(query), single


def _factors(zq: np.ndarray, zp: np.ndarray, spec: KernelSpec, deriv: bool = False):
    """Per-coordinate kernel factors K_h(zq - zp), shape (dim, m, n)."""
    h = spec.bandwidth
    u = (zq[:, None, :] - zp[None, :, :]) / h
    u = np.moveaxis(u, 2, 0)
    k = kernel_eval(u, spec.family) / h
    if not deriv:
        return k
    return k, kernel_deriv(u, spec.family) / (h * h)


def _floor(spec: KernelSpec, dim: int, n: int) -> float:
    kmax = (kernel_eval(0.0, spec.family) / spec.bandwidth) ** dim
    return FLOOR_FACTOR * kmax * n


def kde(inp: SmootherInput, query: Optional[np.ndarray], spec: KernelSpec):
    """
    Product-kernel density estimate.

    Args:
        inp: Sample
        query: One point (dim,), several (m, dim), or None for the sample itself
        spec: Kernel and bandwidth

    Returns:
        Density in original units; a float for a single query
    """
    zq, single = _as_queries(inp, query)
    zp = inp.z
    out = np.empty(zq.shape[0])
    for start in range(0, zq.shape[0], _CHUNK):
        stop = start + _CHUNK
        out[start:stop] = np.prod(_factors(zq[start:stop], zp, spec), axis=0).mean(axis=1)
    out /= np.prod(inp.scale)
    empty = int(np.sum(out == 0.0))
    if empty:
        warnings.warn(f"kde: {empty} queries have no sample within the kernel support", SmootherWarning)
    return float(out[0]) if single else out


def log_density_gradient(
    inp: SmootherInput,
    conditioners: Optional[np.ndarray],
    query: Optional[np.ndarray],
    spec: KernelSpec,
    query_conditioners: Optional[np.ndarray] = None,
):
    """
    Gradient of log f(t, c) with respect to the target coordinates t.

    The conditioners c enter as extra kernel factors, so for a conditional
    density f(t | c) the result is its log-gradient in t. The estimate is the
    ratio of kernel-derivative sums to kernel sums.

    Args:
        inp: Target coordinates of the sample
        conditioners: Optional n x c conditioning coordinates of the sample
        query: Target query points, or None for the sample itself
        spec: Kernel and bandwidth
        query_conditioners: Conditioning coordinates of the queries

    Returns:
        m x dim_target gradient (vector for a single query)
    """
    n_target = inp.dim
    if conditioners is not None:
        conditioners = np.asarray(conditioners, dtype=float)
        if conditioners.ndim == 1:
            conditioners = conditioners[:, None]
        joint = SmootherInput.from_points(np.hstack([inp.points, conditioners]), standardize=inp.standardized)
        if query is not None:
            if query_conditioners is None:
                raise DimensionError("query_conditioners required when a query is given with conditioners")
            q = np.atleast_1d(np.asarray(query, dtype=float))
            qc = np.atleast_1d(np.asarray(query_conditioners, dtype=float))
            query = np.hstack([q, qc]) if q.ndim == 1 else np.hstack([q, qc.reshape(q.shape[0], -1)])
    else:
        joint = inp
    zq, single = _as_queries(joint, query)
    zp = joint.z
    floor = _floor(spec, joint.dim, joint.n)
    grad = np.empty((zq.shape[0], n_target))
    clamped = 0
    for start in range(0, zq.shape[0], _CHUNK):
        stop = start + _CHUNK
        k, kp = _factors(zq[start:stop], zp, spec, deriv=True)
        denom = np.prod(k, axis=0).sum(axis=1)
        low = denom < floor
        clamped += int(low.sum())
        denom = np.where(low, floor, denom)
        for j in range(n_target):
            others = np.prod(np.delete(k, j, axis=0), axis=0) if joint.dim > 1 else 1.0
            grad[start:stop, j] = (kp[j] * others).sum(axis=1) / denom
    if clamped:
        warnings.warn(f"log_density_gradient: clamped {clamped} denominators", SmootherWarning)
        logger.debug("log_density_gradient clamped %d of %d denominators", clamped, zq.shape[0])
    grad /= joint.scale[:n_target]
    return grad[0] if single else grad


def _nearest(zq: np.ndarray, zp: np.ndarray, exclude: Optional[np.ndarray]) -> np.ndarray:
    dist = np.sum((zq[:, None, :] - zp[None, :, :]) ** 2, axis=2)
    if exclude is not None:
        dist[np.arange(zq.shape[0]), exclude] = np.inf
    return np.argmin(dist, axis=1)


def _nw_in_chunks(inp: SmootherInput, zq: np.ndarray, spec: KernelSpec, leave_one_out: bool, warn: bool = True):
    zp = inp.z
    out = np.empty((zq.shape[0], inp.responses.shape[1]))
    fallback = 0
    for start in range(0, zq.shape[0], _CHUNK):
        stop = min(start + _CHUNK, zq.shape[0])
        w = np.prod(_factors(zq[start:stop], zp, spec), axis=0)
        rows = np.arange(stop - start)
        if leave_one_out:
            w[rows, start + rows] = 0.0
        total = w.sum(axis=1)
        empty = total <= 0.0
        safe = np.where(empty, 1.0, total)
        out[start:stop] = (w @ inp.responses) / safe[:, None]
        if np.any(empty):
            idx = rows[empty]
            exclude = (start + idx) if leave_one_out else None
            nn = _nearest(zq[start:stop][idx], zp, exclude)
            out[start:stop][idx] = inp.responses[nn]
            fallback += idx.size
    if fallback and warn:
        warnings.warn(f"nw_regress: {fallback} queries fell back to the nearest neighbour", SmootherWarning)
    return out


def nw_regress(inp: SmootherInput, query: Optional[np.ndarray], spec: KernelSpec, leave_one_out: bool = False):
    """
    Nadaraya-Watson regression of the responses on the points.

    Args:
        inp: Sample with responses
        query: One point, several points, or None for the sample itself
        spec: Kernel and bandwidth
        leave_one_out: Drop each sample's own weight (in-sample queries only)

    Returns:
        Fitted response vector(s); zero-weight queries use the nearest sample
    """
    if inp.responses is None:
        raise DataError("nw_regress needs responses")
    if leave_one_out and query is not None:
        raise DataError("leave_one_out applies to in-sample evaluation only")
    zq, single = _as_queries(inp, query)
    out = _nw_in_chunks(inp, zq, spec, leave_one_out)
    return out[0] if single else out


def bandwidth_grid(inp: SmootherInput) -> np.ndarray:
    """Log grid of 20 bandwidths over [h0/8, 8 h0] with h0 = n^(-1/(dim+4)) * mean SD."""
    h0 = inp.n ** (-1.0 / (inp.dim + 4)) * inp.spread()
    return h0 * np.logspace(-np.log10(CV_GRID_SPAN), np.log10(CV_GRID_SPAN), CV_GRID_SIZE)


def _lscv(inp: SmootherInput, spec: KernelSpec) -> float:
    zp = inp.z
    h = spec.bandwidth
    n = inp.n
    squared = 0.0
    cross = 0.0
    for start in range(0, n, _CHUNK):
        block = zp[start:start + _CHUNK]
        u = np.moveaxis((block[:, None, :] - zp[None, :, :]) / h, 2, 0)
        squared += np.prod(kernel_self_convolution(u, spec.family) / h, axis=0).sum()
        k = np.prod(kernel_eval(u, spec.family) / h, axis=0)
        rows = np.arange(block.shape[0])
        k[rows, start + rows] = 0.0
        cross += k.sum()
    return squared / n**2 - 2.0 * cross / (n * (n - 1))


def _loo_risk(inp: SmootherInput, spec: KernelSpec) -> float:
    fitted = _nw_in_chunks(inp, inp.z, spec, leave_one_out=True, warn=False)
    sd = inp.responses.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return float(np.sum(((inp.responses - fitted) / sd) ** 2))


def cv_bandwidth(inp: SmootherInput, task: str, family: str = "biweight") -> float:
    """
    Cross-validated bandwidth on the standard log grid.

    Args:
        inp: Sample (with responses for regression)
        task: 'density' (least-squares CV) or 'regression' (leave-one-out squared error)
        family: Kernel family

    Returns:
        Selected grid bandwidth; ties go to the smaller bandwidth

    Raises:
        DataError: Fewer than 10 points, zero-variance columns or missing responses
    """
    if inp.n < 10:
        raise DataError(f"Cross-validation needs at least 10 points, got {inp.n}")
    sd = inp.points.std(axis=0)
    if np.any(sd <= 0):
        raise DataError("Zero-variance coordinate columns", {"columns": np.flatnonzero(sd <= 0).tolist()})
    if task == "density":
        risk = _lscv
    elif task == "regression":
        if inp.responses is None:
            raise DataError("Regression cross-validation needs responses")
        risk = _loo_risk
    else:
        raise DataError(f"Unknown cross-validation task {task!r}")
    grid = bandwidth_grid(inp)
    scores = [risk(inp, KernelSpec(family, float(h))) for h in grid]
    best = float(grid[int(np.argmin(scores))])
    logger.debug("cv_bandwidth(%s, dim=%d, n=%d) -> %.4g", task, inp.dim, inp.n, best)
    return best
