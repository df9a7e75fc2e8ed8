"""Savitzky-Golay derivative filtering along the spectral axis."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SgConfig:
    window: int = 15
    polyorder: int = 2
    deriv: int = 1

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SG window must be a positive odd integer, got {self.window}")
        if not 0 <= self.polyorder < self.window:
            raise ValueError(f"SG polyorder must be in [0, window), got {self.polyorder}")
        if not 0 <= self.deriv <= self.polyorder:
            raise ValueError(f"SG deriv must be in [0, polyorder], got {self.deriv}")


def sg_coefficients(cfg=SgConfig()):
    """Weights ``w`` with ``w @ window`` = deriv-th derivative of the LSQ polynomial at the window centre.

    Unit sample spacing; ``window`` is ordered from lowest to highest index.
    """
    half = cfg.window // 2
    pos = np.arange(-half, half + 1, dtype=np.float64)
    vander = pos[:, None] ** np.arange(cfg.polyorder + 1)[None, :]
    # row `deriv` of the pseudo-inverse maps samples to the deriv-th polynomial coefficient
    coef_map = np.linalg.pinv(vander)
    return coef_map[cfg.deriv] * math.factorial(cfg.deriv)


def sg_filter(spectra, cfg=SgConfig()):
    """Filter the last axis of ``spectra`` with reflect padding; shape is preserved."""
    x = np.asarray(spectra)
    if x.shape[-1] < cfg.window:
        raise ValueError(f"need at least {cfg.window} bands for SG window {cfg.window}, got {x.shape[-1]}")
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    w = sg_coefficients(cfg)
    half = cfg.window // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x.astype(np.float64), pad, mode="reflect")
    return (sliding_window_view(xp, cfg.window, axis=-1) @ w).astype(dtype)


def sg_filter_patch(patch, cfg=SgConfig()):
    return replace(patch, data=sg_filter(patch.data, cfg))
