"""
File formats of the workbench.

Trace CSV (UTF-8, header required)::

    job_id,cage_id,minute_index,watts,cap_watts

``cap_watts`` is optional; when present and non-empty the reading is
right-censored and ``watts`` must equal it. Minutes are contiguous per
(job_id, cage_id) and every cage of a job shares one minute grid. Floats are
written with round-trip precision so write -> read is lossless.
"""

import json
import os
from typing import Any, Dict, Iterable, List

import numpy as np
import pandas as pd
import structlog

from jobpower.services.core_model import JobSeries
from jobpower.utils.exceptions import DataFormatError

logger = structlog.get_logger(__name__)

TRACE_COLUMNS = ["job_id", "cage_id", "minute_index", "watts", "cap_watts"]
REQUIRED_COLUMNS = TRACE_COLUMNS[:4]


def _ensure_parent_dir(path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)


def _numeric_column(df: pd.DataFrame, column: str, allow_blank: bool = False) -> np.ndarray:
    values = pd.to_numeric(df[column], errors="coerce")
    bad = values.isna() & (~df[column].isna() | (not allow_blank))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError("Value is not a number", row=row + 2, column=column)
    return values.to_numpy(dtype=float)


def read_traces(path: str) -> List[JobSeries]:
    """Parse a trace CSV into JobSeries in order of first appearance"""
    try:
        df = pd.read_csv(path, dtype={"job_id": str, "cage_id": str}, keep_default_na=True)
    except FileNotFoundError as e:
        raise DataFormatError(f"Trace file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"Cannot parse trace file {path}: {e}") from e

    for column in REQUIRED_COLUMNS:
        if column not in df.columns:
            raise DataFormatError("Missing required column", column=column)
    unknown = [c for c in df.columns if c not in TRACE_COLUMNS]
    if unknown:
        raise DataFormatError(f"Unknown columns {unknown}")

    minutes = _numeric_column(df, "minute_index")
    watts = _numeric_column(df, "watts")
    caps = _numeric_column(df, "cap_watts", allow_blank=True) if "cap_watts" in df.columns else np.full(len(df), np.nan)

    for row in range(len(df)):
        if minutes[row] < 0 or minutes[row] != int(minutes[row]):
            raise DataFormatError("minute_index must be a nonnegative integer", row=row + 2, column="minute_index")
        if watts[row] < 0:
            raise DataFormatError("watts must be nonnegative", row=row + 2, column="watts")
        if not np.isnan(caps[row]) and caps[row] != watts[row]:
            raise DataFormatError("censored reading must equal its cap", row=row + 2, column="cap_watts")

    df = df.assign(_minute=minutes.astype(int), _watts=watts, _cap=caps, _row=np.arange(len(df)) + 2)
    jobs: List[JobSeries] = []
    for job_id, job_rows in df.groupby("job_id", sort=False):
        grids, power, censor = [], [], []
        for _, cage_rows in job_rows.groupby("cage_id", sort=False):
            cage_rows = cage_rows.sort_values("_minute", kind="stable")
            grid = cage_rows["_minute"].to_numpy()
            if grid.size and not np.array_equal(grid, np.arange(grid[0], grid[0] + grid.size)):
                raise DataFormatError(f"job {job_id}: minutes are not contiguous",
                                      row=int(cage_rows["_row"].iloc[0]), column="minute_index")
            grids.append(grid)
            power.append(cage_rows["_watts"].to_numpy())
            censor.append(cage_rows["_cap"].to_numpy())
        if any(not np.array_equal(g, grids[0]) for g in grids):
            raise DataFormatError(f"job {job_id}: cages do not share one minute grid",
                                  row=int(job_rows["_row"].iloc[0]), column="minute_index")
        jobs.append(JobSeries(str(job_id), np.vstack(power), np.vstack(censor),
                              start_minute=int(grids[0][0]) if grids[0].size else 0))

    logger.info("Traces loaded", path=path, jobs=len(jobs), rows=len(df))
    return jobs


def traces_frame(jobs: Iterable[JobSeries]) -> pd.DataFrame:
    records = []
    for job in jobs:
        for cage in range(job.n_cages):
            for t in range(job.length):
                cap = job.caps[cage, t]
                records.append((job.job_id, cage, job.start_minute + t,
                                float(job.watts[cage, t]), None if np.isnan(cap) else float(cap)))
    return pd.DataFrame.from_records(records, columns=TRACE_COLUMNS)


def write_traces(path: str, jobs: Iterable[JobSeries]) -> None:
    write_table(path, traces_frame(jobs))


def write_table(path: str, df: pd.DataFrame) -> None:
    """CSV with round-trip float precision and Unix line endings"""
    _ensure_parent_dir(path)
    df.to_csv(path, index=False, lineterminator="\n", na_rep="")


def write_json(path: str, data: Any) -> None:
    _ensure_parent_dir(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise DataFormatError(f"File not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Invalid JSON in {path}: {e.msg}", row=e.lineno) from e
