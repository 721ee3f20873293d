"""Event ingestion, weekly aggregation, and panel bookkeeping.

The raw input is a long table of (date, unit, count) event records. It is
aggregated into a wide weekly table (one column per unit), from which a
:class:`Panel` is built: one treated outcome series, a matrix of control
series, and the onset index ``t0`` separating pre- and post-intervention
periods. All downstream estimators consume :class:`Panel` objects.

Conventions
-----------
* Weeks are contiguous 7-day blocks anchored at a caller-supplied start
  date (not calendar/ISO weeks). Week ``w`` (0-based) covers the days
  ``[start + 7w, start + 7(w+1))``.
* A trailing block shorter than 7 days is dropped, never padded.
* Missing (date, unit) combinations count as zero events.
* ``t0`` is the number of pre-onset periods: rows ``[0, t0)`` are
  pre-intervention, rows ``[t0, T)`` are post-intervention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, SchemaError

DEFAULT_SCHEMA = {"date": "date", "unit": "unit", "count": "count"}

WEEK_COLUMN = "week_start"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class RawEventTable:
    """Normalized long table of daily event counts.

    ``data`` has columns ``date`` (datetime64[ns]), ``unit`` (str) and
    ``count`` (int64); duplicate (date, unit) rows have already been summed.
    ``source_rows`` is the number of parsed input rows before deduplication.
    """

    data: pd.DataFrame
    source_rows: int

    @property
    def units(self) -> list[str]:
        return sorted(self.data["unit"].unique())

    @property
    def date_range(self) -> tuple[pd.Timestamp, pd.Timestamp]:
        return self.data["date"].min(), self.data["date"].max()


def ingest_csv(path, schema: dict | None = None) -> RawEventTable:
    """Read a long event CSV into a :class:`RawEventTable`.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row, UTF-8, comma separated.
    schema : dict, optional
        Maps the logical names ``date``, ``unit``, ``count`` to the actual
        column names in the file. Defaults to the identity mapping.

    Returns
    -------
    RawEventTable
        Duplicate (date, unit) pairs are summed; counts are validated to be
        nonnegative integers and dates to parse as ISO calendar dates.

    Raises
    ------
    SchemaError
        If a declared column is missing from the file.
    DataError
        On the first unparseable date or negative/invalid count; the message
        carries the 1-based line number of the offending row.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)

    missing = [schema[key] for key in ("date", "unit", "count") if schema[key] not in frame.columns]
    if missing:
        raise SchemaError(
            f"input file {path} lacks required column(s): {', '.join(missing)}"
        )

    dates = pd.to_datetime(frame[schema["date"]], format="%Y-%m-%d", errors="coerce")
    bad = np.flatnonzero(dates.isna().to_numpy())
    if bad.size:
        # header is line 1, first data row is line 2
        line = int(bad[0]) + 2
        raise DataError(
            f"unparseable date {frame[schema['date']].iloc[bad[0]]!r} at line {line} of {path}"
        )

    counts = pd.to_numeric(frame[schema["count"]], errors="coerce")
    bad = np.flatnonzero(~np.isfinite(counts.to_numpy()) | (counts.to_numpy() < 0))
    if bad.size:
        line = int(bad[0]) + 2
        raise DataError(
            f"invalid count {frame[schema['count']].iloc[bad[0]]!r} at line {line} of {path}; "
            "counts must be nonnegative numbers"
        )

    tidy = pd.DataFrame(
        {
            "date": dates,
            "unit": frame[schema["unit"]].astype(str),
            "count": counts.astype(np.int64),
        }
    )
    tidy = tidy.groupby(["date", "unit"], as_index=False)["count"].sum()
    tidy = tidy.sort_values(["date", "unit"], kind="stable").reset_index(drop=True)
    return RawEventTable(data=tidy, source_rows=len(frame))


def aggregate_weekly(
    raw: RawEventTable,
    start_date=None,
    merge: dict[str, str] | None = None,
    end_date=None,
) -> pd.DataFrame:
    """Aggregate daily events into a wide weekly table.

    Parameters
    ----------
    raw : RawEventTable
    start_date : date-like, optional
        Anchor of the first week. Defaults to the earliest date in the data.
        Must not postdate any observation.
    merge : dict, optional
        Maps raw unit names onto target names; all sources of a target are
        summed into one column (e.g. merging two interdependent units into a
        single treated series). Unmapped units keep their own name.
    end_date : date-like, optional
        Last calendar day of the intended window. Defaults to the latest
        date in the data. Only weeks fully covered by
        ``[start_date, end_date]`` are kept; a trailing partial week is
        dropped.

    Returns
    -------
    pandas.DataFrame
        Indexed by ``week_start`` (datetime64), one column per unit, sorted
        unit names, integer-valued floats. Weeks without any event are zero.
    """
    if raw.data.empty:
        raise DataError("cannot aggregate an empty event table")

    data_min, data_max = raw.date_range
    start = pd.Timestamp(start_date) if start_date is not None else data_min
    end = pd.Timestamp(end_date) if end_date is not None else data_max
    if start > data_min:
        raise DataError(
            f"start_date {start.date()} postdates the earliest observation {data_min.date()}"
        )

    n_weeks = int((end - start).days + 1) // 7
    if n_weeks < 1:
        raise DataError("window shorter than one full week; nothing to aggregate")

    events = raw.data.copy()
    if merge:
        events["unit"] = events["unit"].map(lambda u: merge.get(u, u))
    week = ((events["date"] - start).dt.days // 7).to_numpy()
    keep = (week >= 0) & (week < n_weeks)
    events = events.loc[keep].assign(week=week[keep])

    wide = events.pivot_table(
        index="week", columns="unit", values="count", aggfunc="sum", fill_value=0
    )
    wide = wide.reindex(range(n_weeks), fill_value=0)
    wide = wide[sorted(wide.columns)].astype(float)
    wide.index = pd.DatetimeIndex(start + pd.to_timedelta(wide.index * 7, unit="D"), name=WEEK_COLUMN)
    wide.columns.name = None
    return wide


def write_weekly_csv(frame: pd.DataFrame, path) -> None:
    """Write a weekly table in the canonical panel CSV format.

    First column ``week_start`` holds ISO dates; remaining columns are one
    per unit at full (shortest round-trip) float precision.
    """
    out = frame.copy()
    out.index = out.index.strftime("%Y-%m-%d")
    out.index.name = WEEK_COLUMN
    out.to_csv(path)


def read_weekly_csv(path) -> pd.DataFrame:
    """Read a canonical panel CSV back into a weekly table."""
    frame = pd.read_csv(path, float_precision="round_trip")
    if WEEK_COLUMN not in frame.columns:
        raise SchemaError(f"panel file {path} lacks the {WEEK_COLUMN!r} column")
    frame[WEEK_COLUMN] = pd.to_datetime(frame[WEEK_COLUMN], format="%Y-%m-%d")
    return frame.set_index(WEEK_COLUMN).astype(float)


@dataclass(frozen=True)
class Panel:
    """Aligned outcome panel for one treated unit and N controls.

    Attributes
    ----------
    times : numpy.ndarray of datetime64[D]
        Week labels, length T.
    treated : numpy.ndarray
        Outcome series of the treated unit, length T.
    controls : numpy.ndarray
        T x N matrix of control outcomes.
    control_names : tuple of str
    treated_name : str
    t0 : int
        Number of pre-onset periods; 1 <= t0 < T.
    """

    times: np.ndarray
    treated: np.ndarray
    controls: np.ndarray
    control_names: tuple
    treated_name: str
    t0: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype="datetime64[D]")
        treated = np.asarray(self.treated, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim != 2:
            raise DataError("controls must be a T x N matrix")
        T = treated.shape[0]
        if times.shape[0] != T or controls.shape[0] != T:
            raise DataError("times, treated and controls must share the same length")
        if controls.shape[1] != len(self.control_names):
            raise DataError("control_names must name every control column")
        if len(set(self.control_names)) != len(self.control_names):
            raise DataError("control names must be unique")
        if self.treated_name in self.control_names:
            raise DataError(f"treated unit {self.treated_name!r} also appears among controls")
        if not (1 <= self.t0 < T):
            raise DataError(f"t0 must satisfy 1 <= t0 < T; got t0={self.t0}, T={T}")
        if not np.all(np.isfinite(treated)) or not np.all(np.isfinite(controls)):
            raise DataError("panel outcomes must be finite with no missing entries")
        for name, arr in (("times", times), ("treated", treated), ("controls", controls)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "control_names", tuple(self.control_names))

    @property
    def n_periods(self) -> int:
        return self.treated.shape[0]

    @property
    def n_controls(self) -> int:
        return self.controls.shape[1]

    @property
    def pre_rows(self) -> np.ndarray:
        return np.arange(self.t0)

    @property
    def post_rows(self) -> np.ndarray:
        return np.arange(self.t0, self.n_periods)

    def to_frame(self) -> pd.DataFrame:
        """Wide weekly table with the treated unit as the first column."""
        data = {self.treated_name: self.treated}
        for j, name in enumerate(self.control_names):
            data[name] = self.controls[:, j]
        frame = pd.DataFrame(data, index=pd.DatetimeIndex(self.times, name=WEEK_COLUMN))
        return frame


def build_panel(series: pd.DataFrame, treated_name: str, t0: int) -> Panel:
    """Assemble a :class:`Panel` from a wide weekly table.

    Parameters
    ----------
    series : pandas.DataFrame
        Weekly table as produced by :func:`aggregate_weekly` (week_start
        index, one column per unit). All columns must have equal length
        (guaranteed by the frame) and no missing entries.
    treated_name : str
        Column to use as the treated outcome; the remaining columns become
        controls in their existing order.
    t0 : int
        Number of pre-onset periods.
    """
    if treated_name not in series.columns:
        raise DataError(f"treated unit {treated_name!r} not found among {list(series.columns)}")
    if series.isna().any().any():
        raise DataError("weekly series contain missing entries")
    control_names = [c for c in series.columns if c != treated_name]
    if not control_names:
        raise DataError("panel needs at least one control unit")
    return Panel(
        times=series.index.to_numpy(dtype="datetime64[D]"),
        treated=series[treated_name].to_numpy(dtype=float),
        controls=series[control_names].to_numpy(dtype=float),
        control_names=tuple(control_names),
        treated_name=treated_name,
        t0=int(t0),
    )


def onset_index(series_index, onset_date) -> int:
    """Number of weeks strictly before ``onset_date`` (the first post week)."""
    onset = pd.Timestamp(onset_date)
    idx = pd.DatetimeIndex(series_index)
    t0 = int((idx < onset).sum())
    return t0


def relabel_treated(panel: Panel, control_name: str) -> Panel:
    """Re-cast one control as the treated unit for a placebo run.

    The original treated unit joins the donor pool (appended after the
    remaining controls); everything else is unchanged.
    """
    if control_name not in panel.control_names:
        raise DataError(f"{control_name!r} is not a control unit of this panel")
    j = panel.control_names.index(control_name)
    others = [i for i in range(panel.n_controls) if i != j]
    new_controls = np.column_stack([panel.controls[:, others], panel.treated])
    new_names = tuple(panel.control_names[i] for i in others) + (panel.treated_name,)
    return Panel(
        times=panel.times,
        treated=panel.controls[:, j].copy(),
        controls=new_controls,
        control_names=new_names,
        treated_name=control_name,
        t0=panel.t0,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Temporal estimation/validation split of the pre-onset range.

    The estimation block is a contiguous prefix whose length is the
    estimation fraction of ``t0`` rounded to the nearest integer (ties round
    up), clamped so both blocks keep at least one period.
    """

    estimation_fraction: float = 0.8
    ordering: str = field(default="temporal")

    def __post_init__(self):
        if not (0.0 < self.estimation_fraction < 1.0):
            raise ConfigError(
                f"estimation_fraction must lie in (0, 1); got {self.estimation_fraction}"
            )
        if self.ordering != "temporal":
            raise ConfigError("only temporal (contiguous prefix) splits are supported")


def temporal_split(panel: Panel, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Partition the pre-onset rows ``[0, t0)`` into estimation and validation blocks.

    Returns
    -------
    (estimation, validation) : pair of numpy index arrays
        Contiguous, non-empty, and jointly exhausting ``range(t0)`` with the
        estimation block strictly first.
    """
    t0 = panel.t0
    if t0 < 2:
        raise ConfigError("temporal split needs at least two pre-onset periods")
    n_est = _round_half_up(spec.estimation_fraction * t0)
    n_est = min(max(n_est, 1), t0 - 1)
    return np.arange(n_est), np.arange(n_est, t0)


def summary_stats(panel: Panel) -> pd.DataFrame:
    """Per-unit descriptive statistics over the full sample.

    Quantiles use linear interpolation on the sorted values; ``sd`` is the
    sample (n-1) standard deviation. The treated unit comes first.
    """
    frame = panel.to_frame()
    return summary_stats_frame(frame)


def summary_stats_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Descriptive statistics for every column of a weekly table."""
    rows = {}
    for name in frame.columns:
        x = frame[name].to_numpy(dtype=float)
        q1, med, q3 = np.percentile(x, [25, 50, 75])
        rows[name] = {
            "mean": float(np.mean(x)),
            "sd": float(np.std(x, ddof=1)) if x.size > 1 else 0.0,
            "min": float(np.min(x)),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(np.max(x)),
        }
    return pd.DataFrame.from_dict(rows, orient="index")
