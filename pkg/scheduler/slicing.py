from typing import List, Tuple

from config import SchedulerConfig


def slice_size(total_length: int, config: SchedulerConfig) -> int:
    """Minimum slice size, grown to ceil(L / max_slices) when the cap binds."""
    return max(config.min_slice_size, -(-total_length // config.max_slices))


def decompose(total_length: int, config: SchedulerConfig) -> List[Tuple[int, int]]:
    """
    Split [0, total_length) into (offset, length) slices.

    Every slice is full size except possibly the last; a transfer below the
    minimum size is one slice.
    """
    if total_length < 1:
        raise ValueError("transfer length must be >= 1")
    size = slice_size(total_length, config)
    return [(offset, min(size, total_length - offset)) for offset in range(0, total_length, size)]
