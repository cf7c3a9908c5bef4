"""Kernel backend selection.

``SHEHIT_BACKEND`` picks the implementation of the hot loops in
:mod:`shehit.kernels`: ``numba`` (default when importable) or ``numpy``.
``SHEHIT_NUM_THREADS`` caps the numba thread pool. Results never depend on
the thread count: parallel loops only write disjoint outputs.
"""

import os

# the bundled TBB is too old for numba; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

BACKEND_ENV = "SHEHIT_BACKEND"
THREADS_ENV = "SHEHIT_NUM_THREADS"

_backend = os.environ.get(BACKEND_ENV, "numba").strip().lower()
if _backend not in ("numba", "numpy"):
    raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {_backend!r}")
if _backend == "numba" and not HAVE_NUMBA:
    _backend = "numpy"


def backend():
    return _backend


def set_backend(name):
    """Switch backend at runtime (used by the benchmark and tests)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def use_numba():
    return _backend == "numba"


def configure_threads(n=None):
    """Apply a thread cap from the argument or ``SHEHIT_NUM_THREADS``."""
    if n is None:
        raw = os.environ.get(THREADS_ENV)
        if not raw:
            return None
        n = int(raw)
    if HAVE_NUMBA:
        n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
    return n


def thread_count():
    if HAVE_NUMBA:
        return numba.get_num_threads()
    return 1


configure_threads()
