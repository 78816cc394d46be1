"""Allocator tuning for the training loop.

Every iteration allocates and frees tens of megabytes of temporaries. With
glibc's default thresholds those blocks are returned to the OS and mapped
again on the next iteration, paying a page fault per 4 KiB each time.
Raising the mmap and trim thresholds keeps the freed blocks in the heap.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_RETAIN_BYTES = 1 << 30
_done = False


def retain_freed_memory() -> bool:
    """Ask glibc to keep freed large blocks; returns whether it applied."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, _RETAIN_BYTES) == 1
    ok = mallopt(_M_TRIM_THRESHOLD, _RETAIN_BYTES) == 1 and ok
    _done = ok
    return ok
