"""Process-level tuning for the training hot path."""

from __future__ import annotations

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Keep large freed buffers in the glibc arena for reuse.

    Training steps allocate and free hundreds of MB of conv scratch per
    batch; with glibc's default mmap threshold every step unmaps and
    refaults those pages, which stalls badly on small-memory hosts. Raising
    the thresholds makes the buffers reusable. No-op off glibc/Linux.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1 and ok
    except OSError:
        return False
    _done = ok
    return ok
