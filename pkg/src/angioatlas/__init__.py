"""Projected-atlas territory mapping for 2D DSA runs."""

import numba

# prefer OpenMP/workqueue over an outdated system TBB (numba warns and falls back otherwise)
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
