# src/storage/csv_output.py

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from ..core.gradients import BsmReport, FdCheckReport
from ..core.uap import RankRepairReport
from ..learning.training import DepthSweepResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class CsvFormatError(ValueError):
    """Raised when an input CSV cannot be used."""
    pass


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(frame)} rows to {path}")


def read_points(path: Union[str, Path], n: int) -> np.ndarray:
    """Input points: the first n columns of a CSV with a header row."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError) as e:
        raise CsvFormatError(f"Cannot read points from {path}: {str(e)}") from e
    if frame.shape[1] < n:
        raise CsvFormatError(f"{path} has {frame.shape[1]} columns, expected at least {n}")
    try:
        points = frame.iloc[:, :n].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise CsvFormatError(f"{path} contains non-numeric entries: {str(e)}") from e
    if not np.all(np.isfinite(points)):
        raise CsvFormatError(f"{path} contains missing or non-finite values")
    return points


def loss_history_frame(history: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({"iter": np.arange(len(history)), "loss": np.asarray(history, dtype=np.float64)})


def eval_frame(xi: np.ndarray, out: np.ndarray) -> pd.DataFrame:
    columns = {f"xi_{i}": xi[:, i] for i in range(xi.shape[1])}
    columns.update({f"phi_{i}": out[:, i] for i in range(out.shape[1])})
    return pd.DataFrame(columns)


def grad_check_frame(report: FdCheckReport) -> pd.DataFrame:
    return pd.DataFrame({
        "param_index": [r.index for r in report.rows],
        "layer": [r.label[0] for r in report.rows],
        "name": [r.label[1] for r in report.rows],
        "analytic": [r.analytic for r in report.rows],
        "fd": [r.fd for r in report.rows],
        "rel_err": [r.rel_err for r in report.rows],
    })


def bsm_frame(report: BsmReport) -> pd.DataFrame:
    rows = report.rows()
    return pd.DataFrame(rows, columns=["j", "det", "sigma_min", "sigma_max"])


def rank_repair_frame(report: RankRepairReport) -> pd.DataFrame:
    records = []
    for j, norms in sorted(report.perturbation_norms.items()):
        for row, norm in enumerate(norms):
            records.append({
                "term": j,
                "row": row,
                "perturbation_norm": float(norm),
                "cap": report.bound_used.get(j, 0.0),
                "rank_deficiency": report.deficient_terms.get(j, 0),
                "zero_a": j in report.zero_a_terms,
            })
    return pd.DataFrame(records, columns=["term", "row", "perturbation_norm", "cap", "rank_deficiency", "zero_a"])


def depth_sweep_frame(result: DepthSweepResult) -> pd.DataFrame:
    return pd.DataFrame({
        "N": [r.depth for r in result.rows],
        "h": [r.h for r in result.rows],
        "sup_error": [r.sup_error for r in result.rows],
        "bound_BN": [r.bound for r in result.rows],
        "within_bound": [r.within_bound for r in result.rows],
        "final_loss": [r.final_loss for r in result.rows],
        "seeds_used": [r.seeds_used for r in result.rows],
    })
