"""Environment configuration, logging setup and the shared parallel map."""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .errors import DataError

T = TypeVar("T")
R = TypeVar("R")

ENV_JOBS = "INNENV_JOBS"
ENV_LOG_LEVEL = "INNENV_LOG_LEVEL"
ENV_KERNEL = "INNENV_KERNEL"

KERNEL_FAMILIES = ("biweight", "epanechnikov")


def resolve_jobs(jobs: Optional[int] = None) -> int:
    """
    Resolve the worker count for parallel stages.

    Precedence: argument > INNENV_JOBS > 1.

    Args:
        jobs: Explicit worker count, or None to consult the environment

    Returns:
        Positive worker count

    Raises:
        DataError: If the resolved value is not a positive integer
    """
    if jobs is None:
        raw = os.environ.get(ENV_JOBS, "1")
        try:
            jobs = int(raw)
        except ValueError as e:
            raise DataError(
                f"{ENV_JOBS} must be a positive integer, got: {raw!r}"
            ) from e
    if jobs < 1:
        raise DataError(f"jobs must be >= 1, got {jobs}")
    return jobs


def resolve_kernel(family: Optional[str] = None) -> str:
    """Kernel family from argument, then INNENV_KERNEL, then biweight."""
    if family is None:
        family = os.environ.get(ENV_KERNEL, "biweight")
    family = family.lower()
    if family not in KERNEL_FAMILIES:
        raise DataError(
            f"Unknown kernel family {family!r}; expected one of {', '.join(KERNEL_FAMILIES)}"
        )
    return family


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging for command-line use.

    Args:
        level: Level name; falls back to INNENV_LOG_LEVEL, then WARNING
    """
    if level is None:
        level = os.environ.get(ENV_LOG_LEVEL, "WARNING")
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise DataError(f"Unknown log level: {level!r}")
    logging.basicConfig(
        level=numeric,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: Optional[int] = None) -> List[R]:
    """
    Map fn over items, in a thread pool when jobs > 1.

    Results come back in input order, so output never depends on the job count.
    """
    jobs = resolve_jobs(jobs)
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))
