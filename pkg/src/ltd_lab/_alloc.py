"""Process-level allocator tuning for graph-heavy numpy workloads.

Reverse-mode training allocates and frees hundreds of megabyte-sized
temporaries per step.  glibc serves those via mmap/munmap by default,
so every step pays fresh page faults and kernel zeroing, which on small
VMs is slower than the arithmetic itself.  Routing large allocations
through the regular heap (and never trimming it) lets the same
already-faulted pages be recycled step after step.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4


def tune_glibc_allocator() -> bool:
    """Disable mmap-backed mallocs and heap trimming; no-op off glibc."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_MAX, 0)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 0x7FFFFFFF)
        return bool(ok)
    except (OSError, AttributeError):
        return False
