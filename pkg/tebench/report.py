import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from telemetry.export import export_csv
from topology.enums import HealthState
from utils import human_bytes, setup_logger

logger = setup_logger(__name__)

SUMMARY_COLUMNS = (
    "policy", "penalty", "block_bytes", "batch", "threads", "iterations", "bytes", "duration_s",
    "throughput_gbps", "mean_us", "p50_us", "p90_us", "p99_us", "failures",
)
RAIL_COLUMNS = (
    "policy", "penalty", "block_bytes", "batch", "threads", "rail_id", "tier", "bytes_ok", "share",
    "p50_us", "p99_us",
)


def _penalty(value: Optional[float]) -> str:
    return "" if value is None else f"{value:g}"


def summary_rows(cells: Iterable) -> List[List]:
    return [[
        cell.policy, _penalty(cell.penalty), cell.block, cell.batch, cell.threads, cell.iterations,
        cell.bytes_moved, f"{cell.duration_s:.6f}", f"{cell.throughput_gbps:.6f}", f"{cell.mean_us:.3f}",
        f"{cell.latency_us(50):.3f}", f"{cell.latency_us(90):.3f}", f"{cell.latency_us(99):.3f}",
        cell.failures,
    ] for cell in cells]


def rail_rows(cells: Iterable) -> List[List]:
    rows = []
    for cell in cells:
        moved = cell.rail_bytes()
        total = sum(moved.values())
        for rail_id, bytes_ok in moved.items():
            stats = cell.snapshot.rails[rail_id]
            rows.append([
                cell.policy, _penalty(cell.penalty), cell.block, cell.batch, cell.threads, rail_id,
                cell.tiers.get(rail_id, ""), bytes_ok, f"{bytes_ok / total:.6f}",
                f"{stats.percentile(50):.3f}", f"{stats.percentile(99):.3f}",
            ])
    return rows


def _write(path: Path, header: Sequence[str], rows: List[List]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_report(cells: Sequence, out_dir, timeline=None) -> Dict[str, Path]:
    """
    Write summary.csv and rails.csv, plus timeline.csv for a failure run.

    Returns:
        Dict[str, Path]: file name -> written path
    """
    out = Path(out_dir)
    written = {
        "summary.csv": _write(out / "summary.csv", SUMMARY_COLUMNS, summary_rows(cells)),
        "rails.csv": _write(out / "rails.csv", RAIL_COLUMNS, rail_rows(cells)),
    }
    if timeline is not None:
        window_s = timeline.cell.snapshot.window_s
        written["timeline.csv"] = export_csv(timeline.cell.snapshot, out / "timeline.csv", window_s)
    logger.info(f"Report written to {out}")
    return written


def format_table(cells: Sequence) -> str:
    """Plain-text summary, one line per cell."""
    header = f"{'policy':<10} {'P':>8} {'block':>8} {'batch':>5} {'thr':>4} {'Gb/s':>10} " \
             f"{'mean us':>11} {'p50 us':>11} {'p99 us':>11} {'fail':>5}"
    lines = [header, "-" * len(header)]
    for cell in cells:
        lines.append(
            f"{cell.policy:<10} {_penalty(cell.penalty):>8} {human_bytes(cell.block):>8} {cell.batch:>5} "
            f"{cell.threads:>4} {cell.throughput_gbps:>10.2f} {cell.mean_us:>11.1f} "
            f"{cell.latency_us(50):>11.1f} {cell.latency_us(99):>11.1f} {cell.failures:>5}"
        )
    return "\n".join(lines)


# Timeline analysis

def throughput_series(rows: Iterable[Dict]) -> List[Tuple[float, float]]:
    """(window start ms, aggregate Gb/s) over all rails, in time order."""
    totals: Dict[float, float] = {}
    for row in rows:
        totals[row["window_start_ms"]] = totals.get(row["window_start_ms"], 0.0) + row["throughput_gbps"]
    return sorted(totals.items())


def mean_throughput(series: Sequence[Tuple[float, float]], start_ms: float, end_ms: float) -> float:
    values = [gbps for t, gbps in series if start_ms <= t < end_ms]
    return sum(values) / len(values) if values else 0.0


def dip_duration_ms(series: Sequence[Tuple[float, float]], fault_ms: float, threshold_gbps: float,
                    window_ms: float) -> float:
    """Length of the first run of windows below ``threshold_gbps`` at or after the fault."""
    below = 0
    started = False
    for t, gbps in series:
        if t + window_ms <= fault_ms:
            continue
        if gbps < threshold_gbps:
            started = True
            below += 1
        elif started:
            break
    return below * window_ms


def readmitted_at(transitions: Iterable, rail_id: str, after_s: float) -> Optional[float]:
    """Time the rail next turned healthy at or after ``after_s``."""
    for transition in transitions:
        if transition.rail_id == rail_id and transition.at >= after_s and transition.current is HealthState.HEALTHY:
            return transition.at
    return None
