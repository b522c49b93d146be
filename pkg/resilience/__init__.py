"""
Link-level fault handling: soft exclusion, heartbeat probing and per-slice retry.
"""

from .health import HealthMonitor, HealthTransition, RailHealth
from .prober import PROBE_BATCH_ID, Prober
from .retry import RetryPolicy, select_retry_pair

__all__ = [
    'HealthMonitor', 'HealthTransition', 'RailHealth', 'PROBE_BATCH_ID', 'Prober',
    'RetryPolicy', 'select_retry_pair',
]
