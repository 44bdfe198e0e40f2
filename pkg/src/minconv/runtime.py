"""Worker-count setting shared by the scan kernels.

Lanes of a scan are independent, so partitioning them across threads
cannot change results; the setting only affects wall time. The default
comes from the MINCONV_WORKERS environment variable, else 1.
"""

from __future__ import annotations

import os

_workers: int | None = None


def default_workers() -> int:
    env = os.environ.get("MINCONV_WORKERS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        return 1
    return max(1, n)


def get_workers() -> int:
    return _workers if _workers is not None else default_workers()


def set_workers(n: int | None) -> None:
    global _workers
    _workers = None if n is None else max(1, int(n))
