"""Differentiable 2D Gaussian surfel splatting with staged appearance refinement."""

import numba

# prefer OpenMP / workqueue; the system TBB is too old for numba and only warns
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"


def set_threads(n: int | None) -> int:
    """Cap numba worker threads; returns the count in effect. Results do not depend on it."""
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n is None or n <= 0 else min(int(n), limit)
    numba.set_num_threads(n)
    return n
