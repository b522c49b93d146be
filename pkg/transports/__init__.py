"""
Transport backends: a uniform post/poll interface and four implementations.
"""

from .base import BackendCapabilities, CompletionEvent, SliceWorkRequest, TransportBackend, TransportContext
from .faults import FaultEntry, FaultSchedule
from .file import FileBackend
from .memory import MemoryBackend
from .simulated import SimulatedBackend
from .tcp import TcpBackend

BACKEND_KINDS = {
    "simulated": SimulatedBackend,
    "tcp": TcpBackend,
    "memory": MemoryBackend,
    "file": FileBackend,
}

__all__ = [
    'BackendCapabilities', 'CompletionEvent', 'SliceWorkRequest', 'TransportBackend', 'TransportContext',
    'FaultEntry', 'FaultSchedule', 'FileBackend', 'MemoryBackend', 'SimulatedBackend', 'TcpBackend',
    'BACKEND_KINDS',
]
