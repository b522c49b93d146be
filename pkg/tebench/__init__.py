"""
Benchmark and fault-injection driver over the transfer engine.
"""

from .report import format_table, write_report
from .runner import (CellResult, SweepReport, TimelineReport, run_cell, run_failure_timeline, run_sensitivity,
                     run_sweep)
from .scenario import BenchScenario

__all__ = [
    'format_table', 'write_report', 'CellResult', 'SweepReport', 'TimelineReport', 'run_cell',
    'run_failure_timeline', 'run_sensitivity', 'run_sweep', 'BenchScenario',
]
