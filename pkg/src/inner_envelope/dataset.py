"""Centered regression data and CSV ingestion."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataError, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Centered predictors X (n x p) and responses Y (n x r) plus their means."""

    X: np.ndarray
    Y: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray

    @classmethod
    def from_arrays(cls, X: np.ndarray, Y: np.ndarray) -> "Dataset":
        """
        Center raw arrays.

        Raises:
            DataError: Non-finite values or mismatched rows
        """
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DataError(f"X and Y must be matrices with equal rows, got {X.shape} and {Y.shape}")
        if X.shape[0] < 2:
            raise DataError("Need at least two observations")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataError("X and Y must contain finite values only")
        x_mean = X.mean(axis=0)
        y_mean = Y.mean(axis=0)
        Xc, Yc = X - x_mean, Y - y_mean
        Xc.setflags(write=False)
        Yc.setflags(write=False)
        return cls(Xc, Yc, x_mean, y_mean)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.Y.shape[1]

    def raw(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.X + self.x_mean, self.Y + self.y_mean

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Re-centered dataset of the given rows (with repetition allowed)."""
        X, Y = self.raw()
        return Dataset.from_arrays(X[rows], Y[rows])

    def permute_responses(self, perm: Sequence[int]) -> "Dataset":
        X, Y = self.raw()
        return Dataset.from_arrays(X, Y[:, list(perm)])


def _by_prefix(frame: pd.DataFrame, prefix: str) -> list:
    cols = [c for c in frame.columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def split_columns(
    frame: pd.DataFrame,
    x_cols: Optional[Sequence[str]] = None,
    y_cols: Optional[Sequence[str]] = None,
) -> Tuple[list, list]:
    """
    Resolve predictor and response columns.

    Without overrides, columns named x1..xp and y1..yr are used in numeric order.

    Raises:
        DataError: With a column report when either role is missing
    """
    x_cols = list(x_cols) if x_cols else _by_prefix(frame, "x")
    y_cols = list(y_cols) if y_cols else _by_prefix(frame, "y")
    missing = [c for c in x_cols + y_cols if c not in frame.columns]
    if missing or not x_cols or not y_cols:
        raise DataError(
            "Could not resolve predictor/response columns",
            {
                "columns": [str(c) for c in frame.columns],
                "x_cols": x_cols,
                "y_cols": y_cols,
                "missing": missing,
            },
        )
    return x_cols, y_cols


def _read_frame(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def read_dataset(
    path: Path,
    x_cols: Optional[Sequence[str]] = None,
    y_cols: Optional[Sequence[str]] = None,
) -> Dataset:
    """
    Load a CSV file with a header row into a centered Dataset.

    Raises:
        DataError: Unreadable file, unresolved columns or non-numeric values
    """
    frame = _read_frame(path)
    x_cols, y_cols = split_columns(frame, x_cols, y_cols)
    try:
        X = frame[x_cols].to_numpy(dtype=float)
        Y = frame[y_cols].to_numpy(dtype=float)
    except ValueError as e:
        raise DataError(f"Non-numeric values in {path}: {e}") from e
    logger.info("Loaded %s: n=%d, p=%d, r=%d", path, X.shape[0], X.shape[1], Y.shape[1])
    return Dataset.from_arrays(X, Y)


def write_dataset(path: Path, X: np.ndarray, Y: np.ndarray) -> None:
    """Write raw X and Y with x1..xp,y1..yr headers, full float precision."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise DimensionError("X and Y have different row counts")
    columns = [f"x{j + 1}" for j in range(X.shape[1])] + [f"y{j + 1}" for j in range(Y.shape[1])]
    frame = pd.DataFrame(np.hstack([X, Y]), columns=columns)
    frame.to_csv(path, index=False, float_format="%.17g")


def read_predictors(path: Path, x_cols: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Load raw predictor rows (no responses needed) from a CSV file.

    Raises:
        DataError: Missing or non-numeric predictor columns
    """
    frame = _read_frame(path)
    x_cols = list(x_cols) if x_cols else _by_prefix(frame, "x")
    missing = [c for c in x_cols if c not in frame.columns]
    if missing or not x_cols:
        raise DataError(
            "Could not resolve predictor columns",
            {"columns": [str(c) for c in frame.columns], "x_cols": x_cols, "missing": missing},
        )
    try:
        X = frame[x_cols].to_numpy(dtype=float)
    except ValueError as e:
        raise DataError(f"Non-numeric values in {path}: {e}") from e
    if not np.all(np.isfinite(X)):
        raise DataError(f"Non-finite predictor values in {path}")
    return X
