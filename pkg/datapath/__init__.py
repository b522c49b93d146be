"""
Batches, submission rings, per-worker transport loops and the engine API.
"""

from .batch import BatchControlBlock, BatchRegistry, BatchStatus
from .engine import TransferEngine, TransferRequest
from .ring import SubmissionRing
from .timeouts import TimeoutWheel
from .transfer import Fragment, Transfer, WorkUnit
from .worker import Worker

__all__ = [
    'BatchControlBlock', 'BatchRegistry', 'BatchStatus', 'TransferEngine', 'TransferRequest',
    'SubmissionRing', 'TimeoutWheel', 'Fragment', 'Transfer', 'WorkUnit', 'Worker',
]
