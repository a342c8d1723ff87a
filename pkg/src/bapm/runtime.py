from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_THREADS = "BAPM_THREADS"


def thread_count() -> int:
    """Worker cap from ``BAPM_THREADS``; 0 (the default) means strict
    single-threaded mode with bitwise-reproducible results."""
    raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_THREADS} must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{ENV_THREADS} must be a non-negative integer, got {n}")
    return n


def is_strict() -> bool:
    return thread_count() == 0


@contextlib.contextmanager
def thread_limits():
    with threadpool_limits(limits=max(1, thread_count())):
        yield
