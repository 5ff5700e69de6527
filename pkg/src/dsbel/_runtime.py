"""Process-level allocator tuning.

The training loop allocates and frees tens of megabytes per layer per step.
glibc serves such blocks with mmap and unmaps them on free, so every step
pays first-touch page faults again (several times the cost of the
arithmetic).  Keeping large blocks on the heap lets freed pages be reused.
Set ``DSBEL_MALLOC_TUNING=0`` to leave the allocator alone.
"""

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4


def tune_allocator() -> bool:
    if os.environ.get("DSBEL_MALLOC_TUNING", "1") == "0" or not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_MAX, 0) == 1
    ok &= mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
    return bool(ok)
