import hashlib
import logging
import os
import sys

def setup_logger(name: str = "railspray") -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(os.getenv("RAILSPRAY_LOG_LEVEL", "INFO").upper())

    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        formatter = logging.Formatter(
            "[%(asctime)s] [%(levelname)s] [%(name)s]: %(message)s", "%Y-%m-%d %H:%M:%S"
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.propagate = False

    return logger

def segment_hash(segment_id: str) -> bytes:
    """16-byte digest used to name a segment on the wire."""
    return hashlib.blake2b(segment_id.encode("utf-8"), digest_size=16).digest()

def human_bytes(value: float) -> str:
    """Format a byte count the way the CLI tables print it (4KiB, 64MiB...)."""
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(value) < 1024 or unit == "GiB":
            if float(value).is_integer():
                return f"{int(value)}{unit}"
            return f"{value:.1f}{unit}"
        value /= 1024
    return f"{value}GiB"

def parse_size(text: str) -> int:
    """Parse sizes such as '4K', '64KiB', '4M', '1G' or plain byte counts."""
    units = {"": 1, "B": 1, "K": 1 << 10, "KB": 1 << 10, "KIB": 1 << 10,
             "M": 1 << 20, "MB": 1 << 20, "MIB": 1 << 20,
             "G": 1 << 30, "GB": 1 << 30, "GIB": 1 << 30}
    raw = text.strip().upper()
    digits = raw.rstrip("KMGIB")
    suffix = raw[len(digits):]
    if not digits or suffix not in units:
        raise ValueError(f"Unsupported size: {text}")
    return int(float(digits) * units[suffix])
