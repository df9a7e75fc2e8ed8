"""Illumination-invariant grape quality regression and scan mapping from raw hyperspectral data."""
import os

# BLAS pools are sized when numpy loads, so the cap must be exported before that import
_cap = os.environ.get("SPECTRA_INVAR_THREADS", "").strip()
if _cap.isdigit() and int(_cap) >= 1:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"
