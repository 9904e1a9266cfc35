"""Data-free quantization of toy CLIP models with prompt-guided, structure-contrastive synthesis."""
import ctypes
import os
import sys

# D4C_THREADS caps BLAS worker threads; it only takes effect before numpy loads
_threads = os.environ.get("D4C_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

if sys.platform.startswith("linux"):
    # keep large numpy buffers on the heap instead of fresh mmaps per op
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass

__version__ = "0.1.0"
