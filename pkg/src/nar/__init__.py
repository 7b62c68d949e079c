"""Neural Architecture Ranker: tier-classifying transformer predictor and
statistics-guided architecture sampling."""
import os as _os

# thread count for BLAS/numba; must be set before numpy is imported
if "NAR_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["NAR_THREADS"])

__version__ = "0.1.0"
