"""
Per-rail counters, service-time histograms and the timeline CSV.
"""

from .export import COLUMNS, export_csv, read_csv, timeline_rows
from .stats import RailStats, TelemetryCollector, TelemetrySnapshot, TransitionRecord

__all__ = [
    'COLUMNS', 'export_csv', 'read_csv', 'timeline_rows',
    'RailStats', 'TelemetryCollector', 'TelemetrySnapshot', 'TransitionRecord',
]
