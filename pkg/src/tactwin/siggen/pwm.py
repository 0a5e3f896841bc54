"""Two-level PWM edge streams built from duty samples."""

from __future__ import annotations

import numpy as np

ALIGNMENTS = ("center", "leading")


def pulse_start(duties, depth: int, alignment: str = "center") -> np.ndarray:
    """Rising-edge position of each pulse, in duty LSBs from the period start.

    Centre alignment puts the pulse at ``floor((2**depth - d) / 2)`` so the
    edge stays on the duty grid.
    """
    d = np.asarray(duties, dtype=np.int64)
    if alignment == "leading":
        return np.zeros_like(d)
    if alignment == "center":
        return ((1 << depth) - d) // 2
    raise ValueError(f"alignment must be one of {ALIGNMENTS}")


def pwm_edge_stream(duties, depth: int, oversample: int | None = None,
                    alignment: str = "center") -> np.ndarray:
    """Sampled PWM waveform, ``oversample`` points per carrier period.

    With ``oversample = 2**depth`` (the default) the result is exactly
    two-level.  Coarser grids box-average the period, so a sample straddling
    an edge takes the fraction of its interval that is high; the per-period
    mean is ``d / 2**depth`` in every case.
    """
    d = np.asarray(duties, dtype=np.int64).ravel()
    period = 1 << depth
    m = period if oversample is None else int(oversample)
    if m <= 0:
        raise ValueError("oversample must be positive")
    on = pulse_start(d, depth, alignment)
    off = on + d
    # sub-interval edges in duty LSBs: j * period / m
    edges = np.arange(m + 1) * period / m
    lo = np.maximum(edges[:-1][None, :], on[:, None])
    hi = np.minimum(edges[1:][None, :], off[:, None])
    frac = np.clip(hi - lo, 0, None) * (m / period)
    return frac.ravel()
