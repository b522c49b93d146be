"""
Loopback TCP backend.

Every network rail gets a listener on the configured host; a worker keeps one
persistent connection per (local rail, remote rail) pair, so rails stay
distinct on loopback. Frames are a fixed little-endian header followed by the
payload; the receiver writes straight into the destination range and answers
with a short ack.

    header: slice id (u64) | batch id (u64) | segment id hash (16 bytes) | offset (u64) | length (u64)
    ack:    slice id (u64) | batch id (u64) | status (u8, 0 = ok)

READ transfers are carried the same way: bytes always travel src -> dst.
"""
import queue
import socket
import struct
import threading
import time
from collections import deque
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from topology.enums import CompletionStatus, Direction, Medium, RailKind
from topology.graph import Rail
from topology.segments import Segment
from transports.base import (MIN_SERVICE_TIME_S, BackendCapabilities, CompletionEvent, SliceWorkRequest,
                             TransportBackend, TransportContext, media_pairs)
from utils import setup_logger

logger = setup_logger(__name__)

HEADER = struct.Struct("<QQ16sQQ")
ACK = struct.Struct("<QQB")
ACK_OK = 0
ACK_FAILED = 1
DRAIN_CHUNK = 1 << 20


def _recv_exact(sock: socket.socket, size: int) -> Optional[bytes]:
    data = bytearray(size)
    if not _recv_into(sock, memoryview(data)):
        return None
    return bytes(data)


def _recv_into(sock: socket.socket, view: memoryview) -> bool:
    got = 0
    while got < view.nbytes:
        n = sock.recv_into(view[got:], view.nbytes - got)
        if n == 0:
            return False
        got += n
    return True


def _drain(sock: socket.socket, length: int) -> bool:
    scratch = memoryview(bytearray(min(length, DRAIN_CHUNK) or 1))
    while length > 0:
        step = min(length, scratch.nbytes)
        if not _recv_into(sock, scratch[:step]):
            return False
        length -= step
    return True


@retry(stop=stop_after_attempt(5), wait=wait_exponential(multiplier=0.01, max=0.5),
       retry=retry_if_exception_type(OSError), reraise=True)
def _connect(host: str, port: int) -> socket.socket:
    sock = socket.create_connection((host, port), timeout=5.0)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class _Listener:
    """Accepts connections for one rail and lands incoming slices in registered segments."""

    def __init__(self, backend: "TcpBackend", rail_id: str):
        self.backend = backend
        self.rail_id = rail_id
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((backend.spec.host, 0))
        self.sock.listen()
        self.port = self.sock.getsockname()[1]
        self._peers: List[socket.socket] = []
        self._thread = threading.Thread(target=self._accept_loop, name=f"tcp-listen-{rail_id}", daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._peers.append(conn)
            threading.Thread(target=self._serve, args=(conn,), name=f"tcp-recv-{self.rail_id}", daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        registry = self.backend.registry
        try:
            while True:
                header = _recv_exact(conn, HEADER.size)
                if header is None:
                    return
                slice_id, batch_id, wire_id, offset, length = HEADER.unpack(header)
                segment = registry.by_wire_id(wire_id)
                view = None
                if segment is not None and segment.contains(offset, length):
                    view = segment.view(offset, length)
                    status = ACK_OK
                else:
                    status = ACK_FAILED

                if view is not None:
                    ok = _recv_into(conn, view)
                elif status == ACK_OK and segment.materialized:
                    data = _recv_exact(conn, length)
                    ok = data is not None
                    if ok:
                        segment.write(offset, data)
                else:
                    ok = _drain(conn, length)
                if not ok:
                    return
                conn.sendall(ACK.pack(slice_id, batch_id, status))
        except OSError as e:
            logger.debug(f"Receiver on {self.rail_id} closed: {e}")
        finally:
            conn.close()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
        for peer in self._peers:
            try:
                peer.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            peer.close()


class _Connection:
    """One persistent stream for a (local rail, remote rail) pair, with FIFO acks."""

    def __init__(self, context: "TcpContext", local_rail: str, remote_rail: str, sock: socket.socket):
        self.context = context
        self.local_rail = local_rail
        self.remote_rail = remote_rail
        self.sock = sock
        self.broken = False
        self._pending: Deque[Tuple[SliceWorkRequest, float]] = deque()
        self._lock = threading.Lock()
        self._outbox: "queue.Queue[Optional[Tuple[SliceWorkRequest, Segment, Segment]]]" = queue.Queue()
        self._sender = threading.Thread(target=self._send_loop, name=f"tcp-send-{local_rail}", daemon=True)
        self._acker = threading.Thread(target=self._ack_loop, name=f"tcp-ack-{local_rail}", daemon=True)
        self._sender.start()
        self._acker.start()

    @property
    def outstanding(self) -> int:
        return len(self._pending)

    def send(self, request: SliceWorkRequest, src: Segment, dst: Segment) -> None:
        with self._lock:
            self._pending.append((request, time.perf_counter()))
        self._outbox.put((request, src, dst))

    def _send_loop(self) -> None:
        while True:
            item = self._outbox.get()
            if item is None:
                return
            request, src, dst = item
            payload = src.view(request.src_offset, request.length) if src.materialized else None
            if payload is None:
                payload = src.read(request.src_offset, request.length) if src.materialized else bytes(request.length)
            try:
                self.sock.sendall(HEADER.pack(request.slice_id, request.batch_id, dst.wire_id,
                                              request.dst_offset, request.length))
                self.sock.sendall(payload)
            except OSError as e:
                self._break(f"send failed: {e}")
                return

    def _ack_loop(self) -> None:
        while True:
            try:
                ack = _recv_exact(self.sock, ACK.size)
            except OSError:
                ack = None
            if ack is None:
                self._break("connection closed")
                return
            slice_id, batch_id, status = ACK.unpack(ack)
            with self._lock:
                if not self._pending:
                    continue
                request, posted = self._pending.popleft()
            if request.slice_id != slice_id or request.batch_id != batch_id:
                self._break(f"ack out of order: got {slice_id}, expected {request.slice_id}")
                return
            self.context._complete(
                request, CompletionStatus.OK if status == ACK_OK else CompletionStatus.FAILED,
                time.perf_counter() - posted,
            )

    def _break(self, reason: str) -> None:
        with self._lock:
            if self.broken and not self._pending:
                return
            self.broken = True
            pending = list(self._pending)
            self._pending.clear()
        if pending:
            logger.warning(f"TCP {self.local_rail}->{self.remote_rail} failed {len(pending)} slices: {reason}")
        for request, posted in pending:
            self.context._complete(request, CompletionStatus.FAILED, time.perf_counter() - posted)
        self.close()

    def close(self) -> None:
        self.broken = True
        self._outbox.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpContext(TransportContext):
    backend: "TcpBackend"

    def __init__(self, backend: "TcpBackend", worker_id: int, rails: Sequence[Rail]):
        super().__init__(backend, worker_id, rails)
        self._connections: Dict[Tuple[str, str], _Connection] = {}
        self._events: Deque[CompletionEvent] = deque()

    def _connection(self, local_rail: str, remote_rail: str) -> _Connection:
        key = (local_rail, remote_rail)
        conn = self._connections.get(key)
        if conn is None or conn.broken:
            sock = _connect(self.backend.spec.host, self.backend.port_of(remote_rail))
            conn = _Connection(self, local_rail, remote_rail, sock)
            self._connections[key] = conn
        return conn

    def post_slices(self, requests: Sequence[SliceWorkRequest]) -> int:
        resolved = self._validate(requests)
        accepted = 0
        for request, src, dst in resolved:
            try:
                conn = self._connection(request.local_rail, request.remote_rail)
            except OSError as e:
                logger.warning(f"TCP connect {request.local_rail}->{request.remote_rail} failed: {e}")
                self._complete(request, CompletionStatus.FAILED, MIN_SERVICE_TIME_S)
                accepted += 1
                continue
            if conn.outstanding >= self.backend.spec.inflight_window:
                break
            conn.send(request, src, dst)
            accepted += 1
        return accepted

    def _complete(self, request: SliceWorkRequest, status: CompletionStatus, elapsed: float) -> None:
        self._events.append(CompletionEvent(
            slice_id=request.slice_id,
            batch_id=request.batch_id,
            attempt=request.attempt,
            status=status,
            rail_id=request.local_rail,
            t_obs=max(elapsed, MIN_SERVICE_TIME_S),
            bytes_moved=request.length if status is CompletionStatus.OK else 0,
            completed_at=self.clock.now(),
        ))

    def poll_completions(self, max_events: int) -> List[CompletionEvent]:
        events = []
        while self._events and len(events) < max_events:
            events.append(self._events.popleft())
        return events

    def next_due_time(self) -> Optional[float]:
        # completions arrive on their own threads: ask to be polled again
        if self._events or any(c.outstanding for c in self._connections.values()):
            return self.clock.now()
        return None

    def _on_fatal(self) -> None:
        for conn in list(self._connections.values()):
            conn._break("backend latched fatal")

    def close(self) -> None:
        for conn in list(self._connections.values()):
            conn.close()
        self._connections.clear()


class TcpBackend(TransportBackend):
    kind = "tcp"

    def __init__(self, spec, graph, registry, clock):
        super().__init__(spec, graph, registry, clock)
        self._listeners: Dict[str, _Listener] = {}

    def _build_capabilities(self, media: Tuple[Medium, ...]) -> BackendCapabilities:
        return BackendCapabilities(
            backend_id=self.backend_id,
            media_pairs=media_pairs(m for m in media if m is not Medium.FILE),
            directions=frozenset({Direction.READ, Direction.WRITE}),
            cross_node=True,
            same_node=True,
            rail_kind=RailKind.NETWORK,
            max_post_size=1 << 32,
            batched_post=False,
        )

    def start(self) -> None:
        for rail in self.graph.network_rails():
            if self.serves(rail) and rail.rail_id not in self._listeners:
                self._listeners[rail.rail_id] = _Listener(self, rail.rail_id)
        logger.info(f"TCP backend {self.backend_id} listening on {len(self._listeners)} rails")

    def port_of(self, rail_id: str) -> int:
        return self._listeners[rail_id].port

    def stop(self) -> None:
        super().stop()
        for listener in self._listeners.values():
            listener.close()
        self._listeners.clear()

    def _new_context(self, worker_id: int, rails: Sequence[Rail]) -> TcpContext:
        return TcpContext(self, worker_id, rails)
