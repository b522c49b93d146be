"""
Route planning, backend substitution and staged pipelines.
"""

from .plan import STAGING_SEGMENT, DirectRoute, Orchestrator, StagedRoute, StageLeg, TransferPlan
from .staging import ChunkRun, StagedJob, StagingManager, StagingPool

__all__ = [
    'STAGING_SEGMENT', 'DirectRoute', 'Orchestrator', 'StagedRoute', 'StageLeg', 'TransferPlan',
    'ChunkRun', 'StagedJob', 'StagingManager', 'StagingPool',
]
