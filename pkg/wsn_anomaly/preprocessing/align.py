"""
Raw record ingestion and alignment onto a regular time grid.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from wsn_anomaly.data_classes import AlignedSeries, RawRecord
from wsn_anomaly.errors import BoundaryError, ConfigError, DataError, GapError

logger = logging.getLogger(__name__)

# Column mapping for Intel Berkeley Research Lab style exports.
IBRL_COLUMN_MAP: Dict[str, str] = {
    "moteid": "node_id",
    "temperature": "temperature",
    "humidity": "humidity",
    "light": "light",
    "voltage": "voltage",
}
IBRL_DATE_COLUMNS = ("date", "time")


def read_records_csv(
    path: Path,
    modalities: Sequence[str],
    column_map: Optional[Dict[str, str]] = None,
    exclude_nodes: Iterable[int] = (),
) -> pd.DataFrame:
    """
    Read sensor records into a frame with columns timestamp, node_id, <modalities>.

    With a column map, IBRL-style exports are accepted: date and time are combined into
    epoch seconds, 1-based mote ids are shifted to 0-based, excluded motes are dropped
    and the remaining ids are re-indexed contiguously.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Input CSV not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        # pandas names the offending line, e.g. "Expected 5 fields in line 3, saw 6"
        raise DataError(f"{path}: {exc}") from exc

    if column_map is not None:
        frame = frame.rename(columns=column_map)
        if all(c in frame.columns for c in IBRL_DATE_COLUMNS):
            stamps = pd.to_datetime(frame["date"] + " " + frame["time"], errors="coerce", format="mixed")
            frame["timestamp"] = (stamps - pd.Timestamp(0)).dt.total_seconds().astype(str)

    missing = [c for c in ("timestamp", "node_id", *modalities) if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")

    out = pd.DataFrame(index=frame.index)
    for column in ("timestamp", "node_id", *modalities):
        raw = frame[column].str.strip()
        parsed = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
        bad = parsed.isna() & raw.ne("") if column in modalities else parsed.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            # +2: one for the header, one for 1-based line numbers
            raise DataError(f"{path}: malformed value {frame[column].iloc[row]!r} in column '{column}' at line {row + 2}")
        out[column] = parsed

    out["node_id"] = out["node_id"].astype(np.int64)
    if column_map is not None and column_map.get("moteid") == "node_id":
        out["node_id"] -= 1

    excluded = set(int(n) for n in exclude_nodes)
    if excluded:
        out = out[~out["node_id"].isin(excluded)]
        logger.info("Excluded nodes %s from %s", sorted(excluded), path.name)
    if column_map is not None or excluded:
        ids = np.sort(out["node_id"].unique())
        out["node_id"] = np.searchsorted(ids, out["node_id"].to_numpy())

    return out.reset_index(drop=True)


def records_to_frame(records: Iterable[RawRecord], modalities: Sequence[str]) -> pd.DataFrame:
    rows = []
    for record in records:
        if len(record.values) != len(modalities):
            raise DataError(f"Record for node {record.node_id} carries {len(record.values)} values, expected {len(modalities)}")
        rows.append((record.timestamp, record.node_id, *[np.nan if v is None else v for v in record.values]))
    return pd.DataFrame(rows, columns=["timestamp", "node_id", *modalities])


def common_span(frame: pd.DataFrame, modalities: Sequence[str]) -> Tuple[float, float]:
    """
    Largest span in which every (node, modality) has a record at or before the start
    and at or after the end.
    """
    starts, ends = [], []
    for _, group in frame.groupby("node_id"):
        for m in modalities:
            t = group.loc[group[m].notna(), "timestamp"]
            if len(t):
                starts.append(t.min())
                ends.append(t.max())
    if not starts:
        raise DataError("No records to align")
    return float(max(starts)), float(min(ends))


def _align_one(t: np.ndarray, v: np.ndarray, grid: np.ndarray, interval: float, node: int, modality: str):
    lo = np.searchsorted(t, grid, side="left")
    hi = np.searchsorted(t, grid + interval, side="left")
    filled = hi <= lo

    out = np.empty(grid.shape[0], dtype=np.float64)
    out[~filled] = v[lo[~filled]]

    if filled.any():
        prev_idx = lo[filled] - 1
        next_idx = hi[filled]
        if (prev_idx < 0).any() or (next_idx >= t.shape[0]).any():
            where = grid[filled][(prev_idx < 0) | (next_idx >= t.shape[0])][0]
            raise BoundaryError(
                f"Empty interval at t={where} for node {node}, modality '{modality}' has no record on one side"
            )
        t0, t1 = t[prev_idx], t[next_idx]
        w = (grid[filled] - t0) / (t1 - t0)
        out[filled] = v[prev_idx] + (v[next_idx] - v[prev_idx]) * w
    return out, filled


def align_timestamps(
    records: Union[pd.DataFrame, Iterable[RawRecord]],
    interval: float,
    span: Optional[Tuple[float, float]] = None,
    modalities: Optional[Sequence[str]] = None,
    num_nodes: Optional[int] = None,
) -> AlignedSeries:
    """
    Resample irregular records onto t_start + k * interval.

    A non-empty interval takes the record closest to its start (records sharing that
    timestamp are averaged). An empty interval is linearly interpolated between the
    closest records before and after it and flagged in fill_mask.
    """
    if not interval > 0:
        raise ConfigError(f"interval must be > 0, got {interval}")
    if isinstance(records, pd.DataFrame):
        frame = records
        modalities = list(modalities or [c for c in frame.columns if c not in ("timestamp", "node_id")])
    else:
        if modalities is None:
            raise ConfigError("modalities must be given when aligning RawRecord objects")
        frame = records_to_frame(records, modalities)
    modalities = list(modalities)

    if num_nodes is None:
        num_nodes = int(frame["node_id"].max()) + 1 if len(frame) else 0
    if span is None:
        span = common_span(frame, modalities)
    t_start, t_end = span
    steps = int(np.floor((t_end - t_start) / interval + 1e-9)) + 1
    grid = t_start + interval * np.arange(steps, dtype=np.float64)

    data = np.empty((num_nodes, len(modalities), steps), dtype=np.float64)
    fill_mask = np.zeros_like(data, dtype=bool)
    groups = dict(tuple(frame.groupby("node_id")))
    for node in range(num_nodes):
        group = groups.get(node)
        for j, modality in enumerate(modalities):
            if group is None or group[modality].notna().sum() == 0:
                raise GapError(node, modality)
            # duplicate timestamps are averaged up front
            series = group.loc[group[modality].notna()].groupby("timestamp")[modality].mean().sort_index()
            data[node, j], fill_mask[node, j] = _align_one(
                series.index.to_numpy(dtype=np.float64),
                series.to_numpy(dtype=np.float64),
                grid,
                interval,
                node,
                modality,
            )

    logger.debug("Aligned %d nodes x %d modalities onto %d grid steps", num_nodes, len(modalities), steps)
    return AlignedSeries(interval=interval, grid=grid, data=data, fill_mask=fill_mask, modalities=modalities)
