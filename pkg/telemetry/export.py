import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from telemetry.stats import BUCKETS, TelemetrySnapshot, histogram_percentile
from topology.enums import HealthState
from utils import setup_logger

logger = setup_logger(__name__)

COLUMNS = (
    "window_start_ms", "rail_id", "bytes_ok", "bytes_failed", "queue_depth_bytes",
    "p50_us", "p99_us", "health_state", "throughput_gbps",
)


def _health_at(snapshot: TelemetrySnapshot, rail_id: str, t: float) -> HealthState:
    state = HealthState.HEALTHY
    for record in snapshot.transitions:
        if record.rail_id == rail_id and record.at <= t:
            state = record.current
    return state


def timeline_rows(snapshot: TelemetrySnapshot, window_s: Optional[float] = None,
                  rail_order: Optional[Sequence[str]] = None) -> List[Dict]:
    """
    Dense (window, rail) grid over every rail that carried traffic.

    ``window_s`` must be a whole multiple of the collection window; cells are
    merged up to it. Rows sort by window, then by ``rail_order``.
    """
    base = snapshot.window_s
    width = window_s or base
    factor = round(width / base)
    if factor < 1 or abs(factor * base - width) > 1e-9:
        raise ValueError(f"window {width} s is not a multiple of the {base} s collection window")
    if not snapshot.windows:
        return []

    order = list(rail_order) if rail_order is not None else list(snapshot.rails)
    active = {rail_id for (_, rail_id) in snapshot.windows}
    rails = [r for r in order if r in active] + sorted(active - set(order))
    windows = [w // factor for (w, _) in snapshot.windows]
    first, last = min(windows), max(windows)

    merged: Dict = {}
    for (window, rail_id), cell in snapshot.windows.items():
        key = (window // factor, rail_id)
        if key not in merged:
            merged[key] = [0, 0, np.zeros(BUCKETS, dtype=np.int64)]
        merged[key][0] += cell.bytes_ok
        merged[key][1] += cell.bytes_failed
        merged[key][2] += cell.histogram
    depths: Dict = {}
    for (window, rail_id), depth in snapshot.queue_samples.items():
        key = (window // factor, rail_id)
        depths[key] = max(depths.get(key, 0), depth)

    rows = []
    for window in range(first, last + 1):
        start = window * width
        for rail_id in rails:
            ok, failed, histogram = merged.get((window, rail_id), (0, 0, np.zeros(BUCKETS, dtype=np.int64)))
            rows.append({
                "window_start_ms": round(start * 1e3, 3),
                "rail_id": rail_id,
                "bytes_ok": int(ok),
                "bytes_failed": int(failed),
                "queue_depth_bytes": int(depths.get((window, rail_id), 0)),
                "p50_us": round(histogram_percentile(histogram, 50), 3),
                "p99_us": round(histogram_percentile(histogram, 99), 3),
                "health_state": _health_at(snapshot, rail_id, start + width).value,
                "throughput_gbps": round(ok * 8 / width / 1e9, 6),
            })
    return rows


def export_csv(snapshot: TelemetrySnapshot, path: Union[str, Path], window_s: Optional[float] = None,
               rail_order: Optional[Sequence[str]] = None) -> Path:
    """
    Write the per-window, per-rail timeline.

    An empty run still produces the header row.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = timeline_rows(snapshot, window_s, rail_order)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([
                f"{row['window_start_ms']:.3f}", row["rail_id"], row["bytes_ok"], row["bytes_failed"],
                row["queue_depth_bytes"], f"{row['p50_us']:.3f}", f"{row['p99_us']:.3f}",
                row["health_state"], f"{row['throughput_gbps']:.6f}",
            ])
    logger.info(f"Wrote {len(rows)} telemetry rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[Dict]:
    """Parse an exported timeline back into typed rows."""
    with Path(path).open(newline="") as handle:
        reader = csv.DictReader(handle)
        rows = []
        for raw in reader:
            rows.append({
                "window_start_ms": float(raw["window_start_ms"]),
                "rail_id": raw["rail_id"],
                "bytes_ok": int(raw["bytes_ok"]),
                "bytes_failed": int(raw["bytes_failed"]),
                "queue_depth_bytes": int(raw["queue_depth_bytes"]),
                "p50_us": float(raw["p50_us"]),
                "p99_us": float(raw["p99_us"]),
                "health_state": raw["health_state"],
                "throughput_gbps": float(raw["throughput_gbps"]),
            })
    return rows
