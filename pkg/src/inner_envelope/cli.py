"""Command implementations behind the inner-envelope console script."""

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy
import sklearn

from . import __version__
from .config import parallel_map, resolve_jobs, resolve_kernel
from .dataset import Dataset, read_dataset, read_predictors, write_dataset
from .errors import ConvergenceError, DataError, DimensionError, InnerEnvelopeError
from .kernel import KernelSpec
from .modelselect import SELECTION_ESTIMATORS, bootstrap_se, se_ratio_ecdf, select_dimension
from .regression import predict_responses, prediction_rmse
from .simulate import SCENARIOS, GeneratedData, Scenario, generate
from .solver import METHODS, KernelConfig, MethodFit, SolverConfig, fit_method
from .subspace import BLOCKS, Basis, InnerEnvelopeBases, subspace_distance

logger = logging.getLogger(__name__)

COMMANDS = ("fit", "simulate", "select-dim", "bootstrap", "predict", "benchmark")
FIT_METHODS = tuple(m for m in METHODS if m != "oracle")
FLOAT_FORMAT = "%.17g"
TRAIN_FRACTION = 0.8
SUBSPACES = ("S1", "S2", "S3")


@dataclass(frozen=True)
class RunConfig:
    """
    Resolved command parameters.

    u and d of None mean "auto" (bootstrap dimension selection); bandwidth of
    None means cross-validated bandwidths.
    """

    command: str
    output: Path
    input: Optional[Path] = None
    method: str = "global"
    u: Optional[int] = None
    d: Optional[int] = None
    kernel: Optional[str] = None
    bandwidth: Optional[float] = None
    B: int = 50
    seed: int = 0
    delta: float = 1e-6
    max_iter: int = 100
    jobs: Optional[int] = None
    x_cols: Optional[Tuple[str, ...]] = None
    y_cols: Optional[Tuple[str, ...]] = None
    scenario: Optional[str] = None
    n: Tuple[int, ...] = ()
    reps: int = 20
    methods: Tuple[str, ...] = ()
    fit_path: Optional[Path] = None
    x_new: Optional[Path] = None
    k: int = 10

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise DataError(f"Unknown command {self.command!r}")
        if (self.u is None) != (self.d is None):
            raise DimensionError("Give both u and d, or neither for automatic selection")
        if self.u is not None and (self.u < 1 or self.d < 1):
            raise DimensionError(f"u and d must be >= 1, got u={self.u}, d={self.d}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise DataError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.B < 1 or self.reps < 1 or self.k < 1:
            raise DataError("B, reps and k must be positive")
        if self.command in ("fit", "bootstrap") and self.method not in FIT_METHODS:
            raise DataError(f"Unknown method {self.method!r}; expected one of {FIT_METHODS}")
        if self.command == "select-dim" and self.method not in SELECTION_ESTIMATORS:
            raise DataError(f"Dimension selection supports {SELECTION_ESTIMATORS}, got {self.method!r}")
        if self.command in ("simulate", "benchmark"):
            if self.scenario not in SCENARIOS:
                raise DataError(f"Unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
            if not self.n or min(self.n) < 1:
                raise DataError(f"Sample sizes must be positive, got {list(self.n)}")
        if self.command == "benchmark":
            if not self.methods:
                raise DimensionError("The benchmark needs at least one method")
            unknown = [m for m in self.methods if m not in METHODS]
            if unknown:
                raise DataError(f"Unknown methods {unknown}; expected a subset of {METHODS}")
        if self.command == "predict" and (self.fit_path is None or self.x_new is None):
            raise DataError("predict needs a fit file and new predictor rows")
        if self.command != "simulate" and self.command != "benchmark" and self.input is None:
            raise DataError(f"{self.command} needs an input CSV")
        resolve_kernel(self.kernel)
        resolve_jobs(self.jobs)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready resolved configuration."""
        out = asdict(self)
        for key in ("output", "input", "fit_path", "x_new"):
            out[key] = None if out[key] is None else str(out[key])
        for key in ("x_cols", "y_cols", "n", "methods"):
            out[key] = None if out[key] is None else list(out[key])
        out["kernel"] = resolve_kernel(self.kernel)
        out["jobs"] = resolve_jobs(self.jobs)
        return out

    def solver_config(self, seed: Optional[int] = None, jobs: Optional[int] = None) -> SolverConfig:
        return SolverConfig(
            delta=self.delta,
            max_outer=self.max_iter,
            seed=self.seed if seed is None else seed,
            jobs=self.jobs if jobs is None else jobs,
        )

    def kernel_config(self) -> KernelConfig:
        family = resolve_kernel(self.kernel)
        if self.bandwidth is None:
            return family
        return KernelSpec(family, self.bandwidth)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _write_manifest(cfg: RunConfig, files: List[str], extra: Optional[Dict[str, Any]] = None) -> None:
    manifest = {
        "command": cfg.command,
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "files": sorted(files),
        "libraries": {
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(cfg.output / "manifest.json", manifest)


def _output_dir(cfg: RunConfig) -> Path:
    cfg.output.mkdir(parents=True, exist_ok=True)
    return cfg.output


def bases_to_payload(bases: InnerEnvelopeBases) -> Dict[str, Any]:
    """Bases as row-major nested lists with their dimensions."""
    payload = {}
    for name in BLOCKS:
        mat = getattr(bases, name).mat
        payload[name] = {"rows": mat.shape[0], "cols": mat.shape[1], "data": mat.tolist()}
    return payload


def bases_from_payload(payload: Dict[str, Any]) -> InnerEnvelopeBases:
    """
    Rebuild bases written by bases_to_payload.

    Raises:
        DataError: Missing blocks
    """
    try:
        blocks = [Basis(np.array(payload[name]["data"], dtype=float)) for name in BLOCKS]
    except (KeyError, TypeError) as e:
        raise DataError(f"Malformed bases block: {e}") from e
    return InnerEnvelopeBases(*blocks)


def _bases_frame(bases: InnerEnvelopeBases) -> pd.DataFrame:
    records = []
    for name in BLOCKS:
        mat = getattr(bases, name).mat
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                records.append({"block": name, "row": i + 1, "col": j + 1, "value": float(mat[i, j])})
    return pd.DataFrame.from_records(records, columns=["block", "row", "col", "value"])


def _resolve_dims(cfg: RunConfig, ds: Dataset, solver_cfg: SolverConfig) -> Tuple[int, int, Optional[dict]]:
    if cfg.u is not None:
        return cfg.u, cfg.d, None
    estimator = cfg.method if cfg.method in SELECTION_ESTIMATORS else "gmm"
    logger.info("Selecting (u, d) with %s over %d bootstrap replicates", estimator, cfg.B)
    sel = select_dimension(ds, cfg.B, cfg.seed, estimator, solver_cfg, cfg.jobs, cfg.kernel_config())
    return sel.u_hat, sel.d_hat, {"estimator": estimator, "B": sel.B, "u_hat": sel.u_hat, "d_hat": sel.d_hat}


def _convergence_block(fit: MethodFit) -> Dict[str, Any]:
    if fit.fit is not None:
        res = fit.fit
        return {
            "converged": res.converged,
            "iterations": res.iterations,
            "score_norm": res.score_norm,
            "initial_score_norm": res.initial_score_norm,
            "trajectory": [list(step) for step in res.trajectory],
        }
    if fit.gmm is not None:
        return {
            "converged": fit.gmm.converged,
            "objective_value": fit.gmm.objective_value,
            "n_starts_used": fit.gmm.n_starts_used,
        }
    return {"converged": True}


def fit_payload(fit: MethodFit, ds: Dataset, u: int, d: int, seed: int) -> Dict[str, Any]:
    """Everything fit.json records about a fitted method."""
    beta = fit.beta.beta
    theta = covariance = permutation = plan = None
    if fit.fit is not None:
        theta, covariance = fit.fit.theta_hat, fit.fit.covariance
        permutation, plan = fit.fit.permutation, fit.fit.plan
    elif fit.gmm is not None:
        theta, covariance = fit.gmm.theta_hat, fit.gmm.covariance
    return {
        "method": fit.method,
        "n": ds.n,
        "p": ds.p,
        "r": ds.r,
        "u": u,
        "d": d,
        "seed": seed,
        "theta": None if theta is None else theta.vector.tolist(),
        "theta_se": None if covariance is None else np.sqrt(np.clip(np.diag(covariance), 0, None)).tolist(),
        "bases": None if fit.bases is None else bases_to_payload(fit.bases),
        "beta": beta.tolist(),
        "intercept": (ds.y_mean - beta @ ds.x_mean).tolist(),
        "permutation": permutation,
        "bandwidths": None if plan is None else plan.to_dict(),
        "convergence": _convergence_block(fit),
    }


def cmd_fit(cfg: RunConfig) -> int:
    """
    Fit one method and write fit.json and bases.csv.

    Raises:
        ConvergenceError: After writing results, when the fit did not converge
    """
    ds = read_dataset(cfg.input, cfg.x_cols, cfg.y_cols)
    out = _output_dir(cfg)
    solver_cfg = cfg.solver_config()
    u, d, selection = _resolve_dims(cfg, ds, solver_cfg)
    fit = fit_method(ds, cfg.method, u, d, cfg.kernel_config(), solver_cfg)
    payload = fit_payload(fit, ds, u, d, cfg.seed)
    payload["dimension_selection"] = selection
    _write_json(out / "fit.json", payload)
    files = ["fit.json"]
    if fit.bases is not None:
        _write_csv(out / "bases.csv", _bases_frame(fit.bases))
        files.append("bases.csv")
    _write_manifest(cfg, files)
    logger.info("Wrote %s fit to %s", cfg.method, out)
    if not fit.converged:
        raise ConvergenceError(f"{cfg.method} fit did not converge; results written to {out}", payload["convergence"])
    return 0


def _truth_payload(data: GeneratedData) -> Dict[str, Any]:
    return {
        "scenario": {"kind": data.scenario.kind, "n": data.scenario.n, "seed": data.scenario.seed},
        "bases": None if data.truth is None else bases_to_payload(data.truth),
        "beta_true": None if data.beta_true is None else data.beta_true.tolist(),
        "noise_basis": None if data.noise_basis is None else data.noise_basis.mat.tolist(),
    }


def cmd_simulate(cfg: RunConfig) -> int:
    """Write data.csv and the truth sidecar truth.json for one scenario."""
    out = _output_dir(cfg)
    data = generate(Scenario(cfg.scenario, cfg.n[0], cfg.seed))
    write_dataset(out / "data.csv", data.X, data.Y)
    _write_json(out / "truth.json", _truth_payload(data))
    _write_manifest(cfg, ["data.csv", "truth.json"])
    return 0


def cmd_select_dim(cfg: RunConfig) -> int:
    """Write criterion_table.csv and selection.json."""
    ds = read_dataset(cfg.input, cfg.x_cols, cfg.y_cols)
    out = _output_dir(cfg)
    sel = select_dimension(ds, cfg.B, cfg.seed, cfg.method, cfg.solver_config(), cfg.jobs, cfg.kernel_config())
    rows = [
        {"u": u, "d": d, "criterion": sel.criterion_table.get((u, d), np.nan), "valid": (u, d) in sel.criterion_table}
        for u, d in sorted(set(sel.criterion_table) | set(sel.invalid_cells))
    ]
    _write_csv(out / "criterion_table.csv", pd.DataFrame.from_records(rows, columns=["u", "d", "criterion", "valid"]))
    _write_json(
        out / "selection.json",
        {
            "u_hat": sel.u_hat,
            "d_hat": sel.d_hat,
            "estimator": cfg.method,
            "B": sel.B,
            "seed": sel.seed,
            "invalid_cells": [list(c) for c in sel.invalid_cells],
        },
    )
    _write_manifest(cfg, ["criterion_table.csv", "selection.json"])
    return 0


def cmd_bootstrap(cfg: RunConfig) -> int:
    """
    Bootstrap SEs of the chosen method and of OLS on the same resamples.

    Writes bootstrap_archive.csv, se_table.csv and se_ratio_ecdf.csv, where
    ratios are SE(OLS) / SE(method).
    """
    ds = read_dataset(cfg.input, cfg.x_cols, cfg.y_cols)
    out = _output_dir(cfg)
    solver_cfg = cfg.solver_config()
    u, d, _ = _resolve_dims(cfg, ds, solver_cfg)
    kernel_cfg = cfg.kernel_config()
    boot = bootstrap_se(ds, u, d, cfg.method, cfg.B, cfg.seed, solver_cfg, cfg.jobs, kernel_cfg=kernel_cfg)
    ols = boot if cfg.method == "ols" else bootstrap_se(ds, u, d, "ols", cfg.B, cfg.seed, solver_cfg, cfg.jobs)

    reps, rows, cols = boot.archive.shape
    rep_idx, row_idx, col_idx = np.meshgrid(np.arange(reps), np.arange(rows), np.arange(cols), indexing="ij")
    archive = pd.DataFrame(
        {
            "replicate": rep_idx.ravel() + 1,
            "response": row_idx.ravel() + 1,
            "predictor": col_idx.ravel() + 1,
            "beta": boot.archive.ravel(),
        }
    )
    _write_csv(out / "bootstrap_archive.csv", archive)

    row_idx, col_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(boot.se > 0, ols.se / boot.se, np.nan)
    table = pd.DataFrame(
        {
            "response": row_idx.ravel() + 1,
            "predictor": col_idx.ravel() + 1,
            "beta": boot.beta_hat.ravel(),
            "se": boot.se.ravel(),
            "p_value": boot.p_values.ravel(),
            "se_ols": ols.se.ravel(),
            "se_ratio": ratio.ravel(),
        }
    )
    _write_csv(out / "se_table.csv", table)
    ratios, ecdf = se_ratio_ecdf(ols.se, boot.se)
    _write_csv(out / "se_ratio_ecdf.csv", pd.DataFrame({"ratio": ratios, "ecdf": ecdf}))
    _write_manifest(
        cfg,
        ["bootstrap_archive.csv", "se_table.csv", "se_ratio_ecdf.csv"],
        {"u": u, "d": d, "failed_replicates": {"method": boot.n_failed, "ols": ols.n_failed}},
    )
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    """
    Predict responses at new predictor rows with the fit's pseudo-outcome pipeline.

    Fits without bases (OLS, PLS, envelope) use the naive pipeline.
    """
    try:
        payload = json.loads(Path(cfg.fit_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read fit file {cfg.fit_path}: {e}") from e
    bases = None if payload.get("bases") is None else bases_from_payload(payload["bases"])
    train = read_dataset(cfg.input, cfg.x_cols, cfg.y_cols)
    if bases is not None and bases.r != train.r:
        raise DimensionError(f"Fit has r = {bases.r} but training data has r = {train.r}")
    X_new = read_predictors(cfg.x_new, cfg.x_cols)
    if X_new.shape[1] != train.p:
        raise DimensionError(f"New rows have {X_new.shape[1]} predictors, training data has {train.p}")
    X_train, Y_train = train.raw()
    pred = predict_responses(X_train, Y_train, X_new, bases, cfg.k)
    out = _output_dir(cfg)
    _write_csv(out / "predictions.csv", pd.DataFrame(pred, columns=[f"y{j + 1}" for j in range(pred.shape[1])]))
    _write_manifest(cfg, ["predictions.csv"], {"pipeline": "naive" if bases is None else "pseudo_outcome"})
    return 0


def _benchmark_cell(
    cfg: RunConfig, data: GeneratedData, method: str, u: int, d: int, rep_seed: int
) -> Dict[str, Any]:
    record: Dict[str, Any] = {"status": "ok", "error": ""}
    X, Y = data.X, data.Y
    n_train = int(round(TRAIN_FRACTION * X.shape[0]))
    try:
        train = Dataset.from_arrays(X[:n_train], Y[:n_train])
        fit = fit_method(train, method, u, d, cfg.kernel_config(), cfg.solver_config(seed=rep_seed, jobs=1), data.truth)
        if not fit.converged:
            record["status"] = "not_converged"
        for name in SUBSPACES:
            record[f"dist_{name}"] = (
                subspace_distance(getattr(fit.bases, name), getattr(data.truth, name))
                if fit.bases is not None and data.truth is not None
                else np.nan
            )
        beta = data.beta_true
        record["mse"] = float(np.sum((fit.beta.beta - beta) ** 2)) if beta is not None else np.nan
        record["rmse"] = (
            prediction_rmse(X[:n_train], Y[:n_train], X[n_train:], Y[n_train:], fit.bases)
            if n_train < X.shape[0]
            else np.nan
        )
    except (InnerEnvelopeError, np.linalg.LinAlgError) as e:
        code = e.code if isinstance(e, InnerEnvelopeError) else "LINALG_ERROR"
        logger.warning("Benchmark cell %s (n=%d, seed=%d) failed: %s", method, X.shape[0], rep_seed, e)
        record.update({"status": "failed", "error": code})
        record.update({f"dist_{name}": np.nan for name in SUBSPACES})
        record.update({"mse": np.nan, "rmse": np.nan})
    return record


def _summary(frame: pd.DataFrame, value: str) -> pd.DataFrame:
    ok = frame[frame["status"] != "failed"]
    grouped = ok.groupby(["n", "method"], sort=True)[value]
    table = pd.DataFrame(
        {
            "median": grouped.median(),
            "iqr": grouped.quantile(0.75) - grouped.quantile(0.25),
            "n_ok": grouped.count(),
        }
    ).reset_index()
    return table


def cmd_benchmark(cfg: RunConfig) -> int:
    """
    Monte Carlo grid over sample sizes, replicates and methods.

    Each replicate's data is fitted on its first 80% of rows; distances and
    coefficient errors come from that fit and RMSE from the held-out rows.
    Failed cells are recorded, never fatal.
    """
    out = _output_dir(cfg)
    started = time.perf_counter()
    seeds = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(len(cfg.n) * cfg.reps)
    ]
    datasets = []
    for i, n in enumerate(cfg.n):
        for rep in range(cfg.reps):
            rep_seed = seeds[i * cfg.reps + rep]
            datasets.append((n, rep + 1, rep_seed, generate(Scenario(cfg.scenario, n, rep_seed))))

    truth = datasets[0][3].truth
    if cfg.u is not None:
        u, d = cfg.u, cfg.d
    elif truth is not None:
        u, d = truth.u, truth.d
    else:
        raise DimensionError(f"Scenario {cfg.scenario} has no true dimensions; pass u and d")

    cells = [(n, rep, rep_seed, data, method) for n, rep, rep_seed, data in datasets for method in cfg.methods]

    def run_cell(cell) -> Dict[str, Any]:
        n, rep, rep_seed, data, method = cell
        record = {"n": n, "method": method, "rep": rep, "seed": rep_seed}
        record.update(_benchmark_cell(cfg, data, method, u, d, rep_seed))
        return record

    columns = ["n", "method", "rep", "seed", "status", "error"] + [f"dist_{s}" for s in SUBSPACES] + ["mse", "rmse"]
    frame = pd.DataFrame.from_records(parallel_map(run_cell, cells, cfg.jobs), columns=columns)
    _write_csv(out / "replicates.csv", frame)

    distance = []
    for name in SUBSPACES:
        table = _summary(frame, f"dist_{name}")
        table.insert(2, "subspace", name)
        distance.append(table)
    _write_csv(out / "distance_table.csv", pd.concat(distance, ignore_index=True))
    _write_csv(out / "mse_table.csv", _summary(frame, "mse"))
    _write_csv(out / "rmse_table.csv", _summary(frame, "rmse"))
    failures = int((frame["status"] == "failed").sum())
    _write_manifest(
        cfg,
        ["replicates.csv", "distance_table.csv", "mse_table.csv", "rmse_table.csv", "timing.json"],
        {"u": u, "d": d, "replicate_seeds": seeds, "failed_cells": failures},
    )
    _write_json(out / "timing.json", {"wall_seconds": time.perf_counter() - started})
    logger.info("Benchmark finished: %d cells, %d failed", len(cells), failures)
    return 0


DISPATCH = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "select-dim": cmd_select_dim,
    "bootstrap": cmd_bootstrap,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
}


def run_command(cfg: RunConfig) -> int:
    return DISPATCH[cfg.command](cfg)
