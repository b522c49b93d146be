import json
from typing import Optional, Sequence, Tuple

from topology.enums import Direction, Medium, RailKind
from topology.graph import Rail
from topology.segments import Segment
from transports.base import BackendCapabilities, TransportBackend
from transports.memory import LocalCopyContext


class FileBackend(TransportBackend):
    """
    Moves bytes between file segments and host memory on the same node.

    File reads and writes go through ``os.pread``/``os.pwrite`` on the
    segment's file, addressed by absolute offset.
    """

    kind = "file"
    default_media = (Medium.HOST, Medium.FILE)

    def _build_capabilities(self, media: Tuple[Medium, ...]) -> BackendCapabilities:
        pairs = frozenset(
            (a, b) for a in media for b in media
            if Medium.FILE in (a, b) and Medium.DEVICE not in (a, b)
        )
        return BackendCapabilities(
            backend_id=self.backend_id,
            media_pairs=pairs,
            directions=frozenset({Direction.READ, Direction.WRITE}),
            cross_node=False,
            same_node=True,
            rail_kind=RailKind.FILE,
            max_post_size=1 << 40,
            batched_post=False,
        )

    def attach_metadata(self, segment: Segment) -> Optional[bytes]:
        if segment.medium is Medium.FILE:
            return json.dumps({"backend": self.backend_id, "path": segment.file_path}).encode()
        if segment.medium in self.capabilities.media:
            return super().attach_metadata(segment)
        return None

    def _new_context(self, worker_id: int, rails: Sequence[Rail]) -> LocalCopyContext:
        return LocalCopyContext(self, worker_id, rails)
