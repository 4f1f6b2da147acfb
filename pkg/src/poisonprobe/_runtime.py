"""Process-level tuning for the many mid-sized temporaries the kernels allocate."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def keep_heap_warm() -> bool:
    """Stop glibc from returning ~1 MB buffers to the OS after every call.

    Each fresh mmap'd block page-faults on first touch, which roughly doubles
    the cost of a small-batch forward/backward pass. No-op off glibc.
    """
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = all(mallopt(opt, val) == 1 for opt, val in (
        (_M_MMAP_THRESHOLD, 512 * 1024 * 1024),
        (_M_TRIM_THRESHOLD, 1024 * 1024 * 1024),
        (_M_TOP_PAD, 64 * 1024 * 1024),
    ))
    _done = ok
    return ok
