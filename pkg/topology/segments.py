import bisect
import hashlib
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from errors import DanglingReference, DuplicateSegment, InvalidRange, OverlappingBuffers, SegmentError, UnknownSegment
from topology.enums import Medium
from topology.graph import TopologyGraph
from utils import segment_hash, setup_logger

logger = setup_logger(__name__)


@dataclass(frozen=True)
class Buffer:
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class SegmentDescriptor:
    """
    What an application hands to ``register_segment``.

    ``data`` adopts caller memory (one writable buffer per ``Buffer``) instead
    of allocating; ``materialize=False`` registers a timing-only segment that
    backends model but never copy.
    """

    segment_id: str
    node_id: str
    medium: Medium
    buffers: Sequence[Union[Buffer, Tuple[int, int]]]
    device_id: Optional[str] = None
    data: Optional[Sequence[bytearray]] = None
    materialize: bool = True

    @classmethod
    def single(cls, segment_id: str, node_id: str, length: int,
               medium: Medium = Medium.HOST, **kwargs) -> "SegmentDescriptor":
        return cls(segment_id, node_id, medium, [Buffer(0, length)], **kwargs)


class MemoryStore:
    """Host or emulated-device buffers held as bytearrays."""

    def __init__(self, buffers: Sequence[Buffer], data: Optional[Sequence[bytearray]] = None):
        if data is None:
            self._arrays = [bytearray(b.length) for b in buffers]
        else:
            if len(data) != len(buffers):
                raise SegmentError("one data buffer is required per registered buffer")
            self._arrays = []
            for buf, array in zip(buffers, data):
                view = memoryview(array)
                if view.readonly or view.nbytes < buf.length:
                    raise SegmentError(f"data for buffer at {buf.offset} must be writable and >= {buf.length} bytes")
                self._arrays.append(view.cast("B"))

    def view(self, index: int, start: int, length: int) -> memoryview:
        return memoryview(self._arrays[index])[start:start + length]

    def read(self, index: int, start: int, length: int) -> bytes:
        return bytes(self.view(index, start, length))

    def write(self, index: int, start: int, data: bytes) -> None:
        self.view(index, start, len(data))[:] = data

    def close(self) -> None:
        pass


class FileStore:
    """File-backed segment; each buffer lives at its logical offset in the file."""

    def __init__(self, path: str, buffers: Sequence[Buffer]):
        self.path = path
        self._buffers = list(buffers)
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
        os.ftruncate(self._fd, max(b.end for b in buffers))

    def view(self, index: int, start: int, length: int) -> None:
        return None

    def read(self, index: int, start: int, length: int) -> bytes:
        position = self._buffers[index].offset + start
        chunks = []
        remaining = length
        while remaining:
            chunk = os.pread(self._fd, remaining, position)
            if not chunk:
                raise SegmentError(f"short read on {self.path}")
            chunks.append(chunk)
            position += len(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def write(self, index: int, start: int, data: Union[bytes, memoryview]) -> None:
        position = self._buffers[index].offset + start
        view = memoryview(data)
        while view.nbytes:
            written = os.pwrite(self._fd, view, position)
            view = view[written:]
            position += written

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class Segment:
    """
    Logical, transport-agnostic data region.

    Buffers are non-overlapping ranges of the segment's address space. Each
    backend may attach one opaque metadata blob, readable back only through
    that backend's id.
    """

    def __init__(self, segment_id: str, node_id: str, medium: Medium, buffers: Sequence[Buffer],
                 device_id: Optional[str] = None, store: Optional[Union[MemoryStore, FileStore]] = None):
        self.segment_id = segment_id
        self.node_id = node_id
        self.medium = medium
        self.device_id = device_id
        self.buffers: Tuple[Buffer, ...] = tuple(sorted(buffers, key=lambda b: b.offset))
        self.wire_id = segment_hash(segment_id)
        self._starts = [b.offset for b in self.buffers]
        self._store = store
        self._metadata: Dict[str, bytes] = {}

    @property
    def materialized(self) -> bool:
        return self._store is not None

    @property
    def size(self) -> int:
        return sum(b.length for b in self.buffers)

    @property
    def file_path(self) -> Optional[str]:
        return getattr(self._store, "path", None)

    def metadata_for(self, backend_id: str) -> Optional[bytes]:
        return self._metadata.get(backend_id)

    def has_metadata(self, backend_id: str) -> bool:
        return backend_id in self._metadata

    def _attach(self, backend_id: str, blob: bytes) -> None:
        self._metadata[backend_id] = blob

    def locate(self, offset: int, length: int) -> Tuple[int, int]:
        """
        Find the buffer holding [offset, offset + length).

        Returns:
            Tuple[int, int]: buffer index and offset inside that buffer

        Raises:
            InvalidRange: the range is empty or not inside a single buffer
        """
        if length < 1 or offset < 0:
            raise InvalidRange(f"{self.segment_id}: invalid range offset={offset} length={length}")
        index = bisect.bisect_right(self._starts, offset) - 1
        if index < 0 or offset + length > self.buffers[index].end:
            raise InvalidRange(
                f"{self.segment_id}: [{offset}, {offset + length}) is not inside one registered buffer"
            )
        return index, offset - self.buffers[index].offset

    def contains(self, offset: int, length: int) -> bool:
        try:
            self.locate(offset, length)
        except InvalidRange:
            return False
        return True

    def _require_store(self) -> Union[MemoryStore, FileStore]:
        if self._store is None:
            raise SegmentError(f"segment {self.segment_id} has no storage")
        return self._store

    def view(self, offset: int, length: int) -> Optional[memoryview]:
        index, start = self.locate(offset, length)
        if self._store is None:
            return None
        return self._store.view(index, start, length)

    def read(self, offset: int, length: int) -> bytes:
        index, start = self.locate(offset, length)
        return self._require_store().read(index, start, length)

    def write(self, offset: int, data: Union[bytes, bytearray, memoryview]) -> None:
        index, start = self.locate(offset, len(data))
        self._require_store().write(index, start, data)

    def checksum(self, offset: Optional[int] = None, length: Optional[int] = None) -> str:
        """blake2b of one range, or of every buffer in offset order when no range is given."""
        digest = hashlib.blake2b(digest_size=16)
        if offset is None:
            for buf in self.buffers:
                digest.update(self.read(buf.offset, buf.length))
        else:
            digest.update(self.read(offset, length if length is not None else 1))
        return digest.hexdigest()

    def close(self) -> None:
        if self._store is not None:
            self._store.close()

    def __repr__(self) -> str:
        return f"Segment({self.segment_id!r}, node={self.node_id!r}, medium={self.medium.value})"


def copy_bytes(src: Segment, src_offset: int, dst: Segment, dst_offset: int, length: int) -> int:
    """
    Move ``length`` bytes between registered ranges, returning bytes moved.

    Timing-only segments move nothing. Memory-to-memory copies go view to view.
    """
    if length <= 0 or not (src.materialized and dst.materialized):
        return 0
    src_view = src.view(src_offset, length)
    dst_view = dst.view(dst_offset, length)
    if dst_view is not None:
        dst_view[:] = src_view if src_view is not None else src.read(src_offset, length)
    else:
        dst.write(dst_offset, src_view if src_view is not None else src.read(src_offset, length))
    return length


class SegmentRegistry:
    """
    Engine-wide segment table.

    Registration is serialized behind one writer lock; lookups read the
    published snapshot without locking.
    """

    def __init__(self, graph: TopologyGraph, file_root: Optional[str] = None):
        self.graph = graph
        self._file_root = file_root
        self._owns_root = False
        self._lock = threading.Lock()
        self._segments: Mapping[str, Segment] = MappingProxyType({})
        self._by_wire_id: Mapping[bytes, Segment] = MappingProxyType({})
        self._backends: Tuple = ()

    def bind_backends(self, backends: Iterable) -> None:
        self._backends = tuple(backends)

    def _file_path(self, segment_id: str) -> str:
        if self._file_root is None:
            self._file_root = tempfile.mkdtemp(prefix="railspray-")
            self._owns_root = True
        os.makedirs(self._file_root, exist_ok=True)
        return os.path.join(self._file_root, segment_hash(segment_id).hex() + ".seg")

    def register(self, descriptor: SegmentDescriptor) -> Segment:
        """
        Validate a descriptor, give it storage and offer it to every backend.

        Raises:
            DuplicateSegment: the id is already registered
            OverlappingBuffers: two buffers share a byte
            DanglingReference: unknown node, or a device that is not on that node
        """
        buffers = sorted((b if isinstance(b, Buffer) else Buffer(*b) for b in descriptor.buffers),
                         key=lambda b: b.offset)
        if not buffers:
            raise InvalidRange(f"segment {descriptor.segment_id} has no buffers")
        for buf in buffers:
            if buf.offset < 0 or buf.length < 1:
                raise InvalidRange(f"segment {descriptor.segment_id}: bad buffer {buf}")
        for prev, cur in zip(buffers, buffers[1:]):
            if cur.offset < prev.end:
                raise OverlappingBuffers(
                    f"segment {descriptor.segment_id}: [{prev.offset}, {prev.end}) overlaps [{cur.offset}, {cur.end})"
                )
        if descriptor.node_id not in self.graph.nodes:
            raise DanglingReference(f"segment {descriptor.segment_id} refers to unknown node {descriptor.node_id}")
        if descriptor.device_id is not None:
            device = self.graph.devices.get(descriptor.device_id)
            if device is None or device.node_id != descriptor.node_id:
                raise DanglingReference(
                    f"segment {descriptor.segment_id}: device {descriptor.device_id} is not on {descriptor.node_id}"
                )

        with self._lock:
            if descriptor.segment_id in self._segments:
                raise DuplicateSegment(f"segment already registered: {descriptor.segment_id}")

            store = None
            if descriptor.materialize:
                if descriptor.medium is Medium.FILE:
                    if descriptor.data is not None:
                        raise SegmentError("file segments cannot adopt caller memory")
                    store = FileStore(self._file_path(descriptor.segment_id), buffers)
                else:
                    store = MemoryStore(buffers, descriptor.data)

            segment = Segment(descriptor.segment_id, descriptor.node_id, descriptor.medium,
                              buffers, descriptor.device_id, store)
            for backend in self._backends:
                blob = backend.attach_metadata(segment)
                if blob is not None:
                    segment._attach(backend.backend_id, blob)

            segments = dict(self._segments)
            segments[segment.segment_id] = segment
            by_wire = dict(self._by_wire_id)
            by_wire[segment.wire_id] = segment
            self._segments = MappingProxyType(segments)
            self._by_wire_id = MappingProxyType(by_wire)

        logger.debug(f"Registered segment {segment.segment_id} ({segment.size} bytes, {segment.medium.value})")
        return segment

    def get(self, segment_id: str) -> Segment:
        segment = self._segments.get(segment_id)
        if segment is None:
            raise UnknownSegment(f"unknown segment: {segment_id}")
        return segment

    def by_wire_id(self, wire_id: bytes) -> Optional[Segment]:
        return self._by_wire_id.get(wire_id)

    def __contains__(self, segment_id: str) -> bool:
        return segment_id in self._segments

    def ids(self) -> List[str]:
        return list(self._segments)

    def close(self) -> None:
        for segment in self._segments.values():
            segment.close()
        if self._owns_root and self._file_root is not None:
            shutil.rmtree(self._file_root, ignore_errors=True)
