"""Continuous transitions between adjacent levels and view-adaptive opacity.

Resolutions are linear scale fractions.  A splat's opacity between levels
``i`` and ``i + 1`` is the linear blend of its occupancy-masked opacities at
the two levels, so the endpoints reproduce the pure level sets exactly.
"""

from __future__ import annotations

import numpy as np

from .model import LayeredModel


class LodError(ValueError):
    pass


def interp_factor(r_t: float, r_lo: float, r_hi: float) -> float:
    """Position of ``r_t`` inside the half-open bracket ``[r_lo, r_hi)`` as t in [0, 1)."""
    if not r_lo < r_hi:
        raise LodError(f"degenerate bracket [{r_lo}, {r_hi})")
    if not r_lo <= r_t < r_hi:
        raise LodError(f"resolution {r_t} outside [{r_lo}, {r_hi})")
    return (r_t - r_lo) / (r_hi - r_lo)


def _masked_opacities(model: LayeredModel, level: int, n: int) -> np.ndarray:
    # effective opacity with unoccupied and not-yet-introduced splats at 0
    ops = np.zeros(n, dtype=np.float64)
    cur = model.level_opacities(level).astype(np.float64)
    ops[: len(cur)] = np.where(model.occupancy[level], cur, 0.0)
    return ops


def _finish(model: LayeredModel, opacity: np.ndarray, return_index: bool):
    n = len(opacity)
    mat = model.all_splats()[:n].copy()
    mat[:, model.schema.column("opacity")] = opacity.astype(np.float32)
    keep = np.flatnonzero(mat[:, model.schema.column("opacity")] > 0)
    if return_index:
        return mat[keep], keep
    return mat[keep]


def interpolate_level(model: LayeredModel, level: int, t: float, *, return_index: bool = False):
    """Splats of ``level + 1`` with opacities blended from ``level`` by ``t``.

    A splat is dropped when its blended opacity is zero, which happens for
    newcomers at ``t = 0`` and for splats unoccupied at both levels.
    """
    if not 0 <= level < model.num_levels - 1:
        raise LodError(f"level {level} has no upper neighbour in a {model.num_levels}-level model")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise LodError(f"interpolation factor {t} outside [0, 1]")
    n = model.cumulative_counts[level + 1]
    lo = _masked_opacities(model, level, n)
    hi = _masked_opacities(model, level + 1, n)
    return _finish(model, (1.0 - t) * lo + t * hi, return_index)


def view_adaptive(model: LayeredModel, target_resolution, *, return_index: bool = False):
    """Per-splat level blending driven by a target-resolution field.

    ``target_resolution`` is a scalar, a length-``total_splats`` array, or a
    callable mapping the ``(n, width)`` splat matrix to such an array.
    A target equal to the top resolution selects the top level.
    """
    mat = model.all_splats()
    n = len(mat)
    field = target_resolution(mat) if callable(target_resolution) else target_resolution
    r_t = np.broadcast_to(np.asarray(field, dtype=np.float64), (n,))
    res = np.asarray(model.resolutions, dtype=np.float64)
    if n and (not np.all(np.isfinite(r_t)) or r_t.min() < res[0] or r_t.max() > res[-1]):
        raise LodError(f"target resolutions must lie in [{res[0]}, {res[-1]}]")
    top = model.num_levels - 1
    masked = np.stack([_masked_opacities(model, k, n) for k in range(model.num_levels)])
    lo = np.clip(np.searchsorted(res, r_t, side="right") - 1, 0, top)
    hi = np.minimum(lo + 1, top)
    at_top = lo == top
    t = np.where(at_top, 1.0, (r_t - res[lo]) / np.where(at_top, 1.0, res[hi] - res[lo]))
    cols = np.arange(n)
    opacity = (1.0 - t) * masked[lo, cols] + t * masked[hi, cols]
    return _finish(model, opacity, return_index)
