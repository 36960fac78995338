"""Process-level knobs for long numpy workloads."""
from __future__ import annotations

import ctypes
import ctypes.util
import logging
import os

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4
_tuned = False


def tune_allocator() -> bool:
    """Keep freed numpy buffers on the glibc heap instead of returning them to the OS.

    Large arrays are otherwise mmapped and unmapped on every allocation, which
    makes each training step pay the first-touch page-fault cost again. Returns
    False when not running on glibc. Set PDDL_NO_MALLOPT=1 to skip.
    """
    global _tuned
    if _tuned:
        return True
    if os.environ.get("PDDL_NO_MALLOPT") == "1":
        return False
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_MAX, 0) == 1 and mallopt(_M_TRIM_THRESHOLD, 2**31 - 1) == 1
    _tuned = ok
    log.debug("allocator tuned: %s", ok)
    return ok


def worker_count(default: int = 1) -> int:
    """Thread cap from PDDL_THREADS."""
    raw = os.environ.get("PDDL_THREADS", "").strip()
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"PDDL_THREADS must be an integer, got {raw!r}") from None
