"""Dynamic Gaussian splatting for deforming tubular scenes."""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

__version__ = "0.1.0"
