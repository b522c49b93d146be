import heapq
import math
from collections import defaultdict
from typing import Dict, Hashable, List, Optional, Tuple


class TimeoutWheel:
    """
    Coarse deadline tracker scanned from the worker loop.

    Deadlines land in fixed-width buckets; cancellation only drops the live
    entry, and stale bucket members are skipped when their bucket comes due.
    """

    def __init__(self, bucket_s: float):
        self.bucket_s = bucket_s
        self._live: Dict[Hashable, Tuple[float, int]] = {}
        self._buckets: Dict[int, List[Hashable]] = defaultdict(list)
        self._heap: List[int] = []

    def __len__(self) -> int:
        return len(self._live)

    def _bucket(self, deadline: float) -> int:
        return math.floor(deadline / self.bucket_s)

    def add(self, key: Hashable, deadline: float, token: int = 0) -> None:
        self._live[key] = (deadline, token)
        bucket = self._bucket(deadline)
        if not self._buckets[bucket]:
            heapq.heappush(self._heap, bucket)
        self._buckets[bucket].append(key)

    def cancel(self, key: Hashable) -> None:
        self._live.pop(key, None)

    def expire(self, now: float) -> List[Tuple[Hashable, int]]:
        """Pop every live (key, token) whose deadline is at or before ``now``."""
        expired = []
        current = self._bucket(now)
        while self._heap and self._heap[0] <= current:
            bucket = heapq.heappop(self._heap)
            keep = []
            for key in self._buckets.pop(bucket, []):
                entry = self._live.get(key)
                if entry is None or self._bucket(entry[0]) != bucket:
                    continue
                if entry[0] <= now:
                    del self._live[key]
                    expired.append((key, entry[1]))
                else:
                    keep.append(key)
            if keep:
                self._buckets[bucket] = keep
                heapq.heappush(self._heap, bucket)
                break
        return expired

    def next_deadline(self) -> Optional[float]:
        while self._heap:
            bucket = self._heap[0]
            deadlines = [
                self._live[key][0] for key in self._buckets.get(bucket, [])
                if key in self._live and self._bucket(self._live[key][0]) == bucket
            ]
            if deadlines:
                return min(deadlines)
            heapq.heappop(self._heap)
            self._buckets.pop(bucket, None)
        return None
