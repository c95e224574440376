"""
Canonical subspace coordinates and subspace algebra.

A k-dimensional subspace of R^m whose top k x k block is invertible is
represented uniquely by the (m - k) x k matrix L = A_lower A_upper^{-1}; its
column-major vectorization is an unconstrained coordinate vector. The canonical
basis of the subspace is Gram-Schmidt applied to [I; L] with a positive R
diagonal. Inner-envelope parameters theta = (gamma, b) are two such coordinate
vectors: gamma places S1 in R^r and b places S2 inside the complement of S1.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, SingularBlockError

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-10
COND_LIMIT = 1e8
FD_STEP = float(np.cbrt(np.finfo(float).eps))
FORWARD_STEP = float(np.sqrt(np.finfo(float).eps))

BLOCKS = ("Gamma", "Gamma0", "B", "B0")


def _gram_schmidt(mat: np.ndarray) -> np.ndarray:
    """Orthonormalize columns with the positive-R-diagonal sign convention."""
    q, r = np.linalg.qr(mat)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def check_dims(r: int, u: int, d: int) -> None:
    """
    Validate an inner-envelope dimension triple.

    Raises:
        DimensionError: Unless u >= 1, d >= 1 and r - u - d >= 1
    """
    if u < 1 or d < 1 or r - u - d < 1:
        raise DimensionError(
            f"Need u >= 1, d >= 1 and u + d <= r - 1; got r={r}, u={u}, d={d}",
            {"r": r, "u": u, "d": d},
        )


@dataclass(frozen=True)
class Basis:
    """Semi-orthogonal k_ambient x k_dim matrix standing for its column span."""

    mat: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.mat, dtype=float)
        if mat.ndim == 1:
            mat = mat[:, None]
        if mat.ndim != 2 or not 1 <= mat.shape[1] <= mat.shape[0]:
            raise DimensionError(f"Basis must be k_ambient x k_dim with 1 <= k_dim <= k_ambient, got {mat.shape}")
        gram_err = np.max(np.abs(mat.T @ mat - np.eye(mat.shape[1])))
        if not gram_err <= ORTHO_TOL:
            raise DimensionError(f"Basis columns are not orthonormal (max deviation {gram_err:.3g})")
        object.__setattr__(self, "mat", _frozen(mat))

    @property
    def k_ambient(self) -> int:
        return self.mat.shape[0]

    @property
    def k_dim(self) -> int:
        return self.mat.shape[1]

    @classmethod
    def from_span(cls, mat: np.ndarray) -> "Basis":
        """Canonical orthonormal basis for the column span of any full-rank matrix."""
        mat = np.asarray(mat, dtype=float)
        if mat.ndim == 1:
            mat = mat[:, None]
        return cls(_gram_schmidt(mat))


@dataclass(frozen=True)
class SubspaceCoords:
    """Unconstrained coordinates of a k_dim-subspace of R^k_ambient."""

    vec: np.ndarray
    k_ambient: int
    k_dim: int

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=float).ravel()
        if not 1 <= self.k_dim <= self.k_ambient:
            raise DimensionError(f"Invalid subspace dims k_ambient={self.k_ambient}, k_dim={self.k_dim}")
        expected = self.k_dim * (self.k_ambient - self.k_dim)
        if vec.size != expected:
            raise DimensionError(
                f"Coordinate vector has length {vec.size}, expected {expected}",
                {"k_ambient": self.k_ambient, "k_dim": self.k_dim},
            )
        if not np.all(np.isfinite(vec)):
            raise DimensionError("Coordinate vector has non-finite entries")
        object.__setattr__(self, "vec", _frozen(vec))

    def lower_block(self) -> np.ndarray:
        return self.vec.reshape((self.k_ambient - self.k_dim, self.k_dim), order="F")


@dataclass(frozen=True)
class Theta:
    """Parameter vector (gamma, b) encoding S1, S2 and S3."""

    gamma: SubspaceCoords
    b: SubspaceCoords

    def __post_init__(self):
        r, u = self.gamma.k_ambient, self.gamma.k_dim
        if self.b.k_ambient != r - u:
            raise DimensionError(f"b lives in R^{self.b.k_ambient}, expected R^{r - u}")
        check_dims(r, u, self.b.k_dim)

    @property
    def r(self) -> int:
        return self.gamma.k_ambient

    @property
    def u(self) -> int:
        return self.gamma.k_dim

    @property
    def d(self) -> int:
        return self.b.k_dim

    @property
    def q(self) -> int:
        return self.gamma.vec.size + self.b.vec.size

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.gamma.vec, self.b.vec])

    @classmethod
    def from_vector(cls, vec: np.ndarray, r: int, u: int, d: int) -> "Theta":
        check_dims(r, u, d)
        vec = np.asarray(vec, dtype=float).ravel()
        n_gamma = (r - u) * u
        if vec.size != n_gamma + (r - u - d) * d:
            raise DimensionError(
                f"theta has length {vec.size}, expected {n_gamma + (r - u - d) * d}",
                {"r": r, "u": u, "d": d},
            )
        return cls(SubspaceCoords(vec[:n_gamma], r, u), SubspaceCoords(vec[n_gamma:], r - u, d))

    @classmethod
    def zeros(cls, r: int, u: int, d: int) -> "Theta":
        return cls.from_vector(np.zeros((r - u) * u + (r - u - d) * d), r, u, d)


@dataclass(frozen=True)
class InnerEnvelopeBases:
    """Gamma, Gamma0 in R^r and B, B0 in the coordinates of Gamma0."""

    Gamma: Basis
    Gamma0: Basis
    B: Basis
    B0: Basis

    def __post_init__(self):
        r = self.Gamma.k_ambient
        if self.Gamma0.k_ambient != r or self.Gamma.k_dim + self.Gamma0.k_dim != r:
            raise DimensionError("Gamma0 must complete Gamma to R^r")
        if self.B.k_ambient != self.Gamma0.k_dim or self.B0.k_ambient != self.Gamma0.k_dim:
            raise DimensionError("B and B0 must live in the coordinates of Gamma0")
        if self.B.k_dim + self.B0.k_dim != self.Gamma0.k_dim:
            raise DimensionError("B0 must complete B")
        check_dims(r, self.Gamma.k_dim, self.B.k_dim)
        if np.max(np.abs(self.Gamma.mat.T @ self.Gamma0.mat)) > ORTHO_TOL:
            raise DimensionError("Gamma and Gamma0 are not orthogonal")
        if np.max(np.abs(self.B.mat.T @ self.B0.mat)) > ORTHO_TOL:
            raise DimensionError("B and B0 are not orthogonal")

    @property
    def r(self) -> int:
        return self.Gamma.k_ambient

    @property
    def u(self) -> int:
        return self.Gamma.k_dim

    @property
    def d(self) -> int:
        return self.B.k_dim

    @property
    def S1(self) -> Basis:
        return self.Gamma

    @property
    def S2(self) -> Basis:
        return Basis(self.Gamma0.mat @ self.B.mat)

    @property
    def S3(self) -> Basis:
        return Basis(self.Gamma0.mat @ self.B0.mat)

    @classmethod
    def from_subspaces(cls, S1: Basis, S2: Basis) -> "InnerEnvelopeBases":
        """Assemble bases from S1 and S2 given in response space."""
        gamma0 = orth_complement(S1)
        b = Basis.from_span(gamma0.mat.T @ S2.mat)
        return cls(S1, gamma0, b, orth_complement(b))

    def permute_rows(self, perm: List[int]) -> "InnerEnvelopeBases":
        """Bases for responses reordered as Y[:, perm]."""
        perm = np.asarray(perm)
        return InnerEnvelopeBases(
            Basis(self.Gamma.mat[perm]), Basis(self.Gamma0.mat[perm]), self.B, self.B0
        )


def response_permutation(A: Basis) -> List[int]:
    """
    Row order whose leading k_dim rows form a well-conditioned block of A.

    Uses QR with column pivoting on A^T.
    """
    _, _, piv = scipy.linalg.qr(A.mat.T, pivoting=True, mode="economic")
    return [int(i) for i in piv]


def _lower_over_upper(A: Basis) -> Optional[np.ndarray]:
    k = A.k_dim
    upper = A.mat[:k]
    cond = np.linalg.cond(upper)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return None
    return np.linalg.solve(upper.T, A.mat[k:].T).T


def coords_to_basis(a: SubspaceCoords) -> Basis:
    """
    Canonical basis of the subspace with coordinates a.

    Args:
        a: Subspace coordinates

    Returns:
        Gram-Schmidt of [I; L] where vec(L) = a (column-major)
    """
    stacked = np.vstack([np.eye(a.k_dim), a.lower_block()])
    return Basis(_gram_schmidt(stacked))


def basis_to_coords(A: Basis) -> SubspaceCoords:
    """
    Coordinates of span(A).

    Args:
        A: Basis whose top k_dim x k_dim block is invertible

    Returns:
        Column-major vectorization of A_lower A_upper^{-1}

    Raises:
        SingularBlockError: If the top block has condition number above 1e8
    """
    lower = _lower_over_upper(A)
    if lower is None:
        perm = response_permutation(A)
        raise SingularBlockError(
            f"Top {A.k_dim}x{A.k_dim} block is singular; reorder rows as {perm}", perm
        )
    return SubspaceCoords(lower.ravel(order="F"), A.k_ambient, A.k_dim)


def orth_complement(A: Basis) -> Basis:
    """
    Canonical orthonormal basis of the orthogonal complement of span(A).

    When the top block of A is invertible the complement of span([I; L]) is
    span([-L^T; I]), which keeps the complement smooth in the coordinates.
    """
    if A.k_dim == A.k_ambient:
        raise DimensionError("Subspace already fills its ambient space; no complement")
    lower = _lower_over_upper(A)
    if lower is None:
        logger.debug("orth_complement: singular top block, using SVD null space")
        return Basis(_gram_schmidt(scipy.linalg.null_space(A.mat.T)))
    stacked = np.vstack([-lower.T, np.eye(A.k_ambient - A.k_dim)])
    return Basis(_gram_schmidt(stacked))


def theta_to_bases(theta: Theta) -> InnerEnvelopeBases:
    gamma = coords_to_basis(theta.gamma)
    b = coords_to_basis(theta.b)
    return InnerEnvelopeBases(gamma, orth_complement(gamma), b, orth_complement(b))


def bases_to_theta(bases: InnerEnvelopeBases) -> Theta:
    """
    Coordinates of (S1, S2) described by any valid bases.

    B is re-expressed in the canonical complement of Gamma before it is charted,
    so bases built with a different Gamma0 map to the same theta.
    """
    gamma = basis_to_coords(bases.Gamma)
    gamma0 = orth_complement(coords_to_basis(gamma))
    b = Basis.from_span(gamma0.mat.T @ bases.S2.mat)
    return Theta(gamma, basis_to_coords(b))


def projection(A: Basis) -> np.ndarray:
    return A.mat @ A.mat.T


def residual_projection(A: Basis) -> np.ndarray:
    return np.eye(A.k_ambient) - projection(A)


def subspace_distance(A: Basis, B: Basis) -> float:
    """Frobenius norm of the difference of the two orthogonal projections."""
    if A.k_ambient != B.k_ambient:
        raise DimensionError(f"Ambient dimensions differ: {A.k_ambient} vs {B.k_ambient}")
    return float(np.linalg.norm(projection(A) - projection(B), "fro"))


def vector_correlation(A: Basis, B: Basis) -> float:
    """Hotelling's q^2 = det(B^T A A^T B) for equal-dimension subspaces."""
    if A.k_ambient != B.k_ambient or A.k_dim != B.k_dim:
        raise DimensionError(
            f"vector_correlation needs equal shapes, got {A.mat.shape} and {B.mat.shape}"
        )
    cross = B.mat.T @ A.mat
    return float(np.clip(np.linalg.det(cross @ cross.T), 0.0, 1.0))


def finite_difference_jacobian(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: Optional[float] = None,
    scheme: str = "central",
) -> np.ndarray:
    """
    Finite-difference Jacobian of a vector-valued map.

    Args:
        fun: Map from R^k to R^m (1-D arrays)
        x: Evaluation point
        rel_step: Relative step; defaults to cbrt(eps) for central and
            sqrt(eps) for forward differences
        scheme: 'central' or 'forward'

    Returns:
        m x k Jacobian
    """
    x = np.asarray(x, dtype=float)
    if scheme not in ("central", "forward"):
        raise ValueError(f"Unknown difference scheme: {scheme}")
    if rel_step is None:
        rel_step = FD_STEP if scheme == "central" else FORWARD_STEP
    base = None if scheme == "central" else np.asarray(fun(x), dtype=float)
    columns = []
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        step = np.zeros_like(x)
        step[j] = h
        if scheme == "central":
            columns.append((np.asarray(fun(x + step)) - np.asarray(fun(x - step))) / (2.0 * h))
        else:
            columns.append((np.asarray(fun(x + step)) - base) / h)
    if not columns:
        m = np.asarray(fun(x)).size
        return np.zeros((m, 0))
    return np.column_stack(columns)


def basis_jacobian(
    theta: Theta,
    which: str,
    rel_step: Optional[float] = None,
    scheme: str = "central",
) -> np.ndarray:
    """
    Derivative of vec(block) with respect to the coordinates it depends on.

    Gamma and Gamma0 depend on gamma only; B and B0 on b only, so the other
    coordinate columns are identically zero and omitted.

    Args:
        theta: Evaluation point
        which: One of 'Gamma', 'Gamma0', 'B', 'B0'
        rel_step: Relative finite-difference step (default cbrt(eps))
        scheme: 'central' or 'forward'

    Returns:
        (rows * cols of block) x (len(gamma) or len(b)) matrix, rows in column-major vec order
    """
    if which not in BLOCKS:
        raise ValueError(f"Unknown block {which!r}; expected one of {BLOCKS}")
    if which in ("Gamma", "Gamma0"):
        coords = theta.gamma
    else:
        coords = theta.b
    complement = which in ("Gamma0", "B0")

    def block(vec: np.ndarray) -> np.ndarray:
        basis = coords_to_basis(SubspaceCoords(vec, coords.k_ambient, coords.k_dim))
        if complement:
            basis = orth_complement(basis)
        return basis.mat.ravel(order="F")

    return finite_difference_jacobian(block, coords.vec, rel_step=rel_step, scheme=scheme)
