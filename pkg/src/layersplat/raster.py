"""Deterministic 2D Gaussian-splat rasterizer with an analytic backward pass.

Splats live in a resolution-independent frame measured in full-resolution
pixels, where full-resolution pixel ``(col, row)`` has its center at
``(col + 0.5, row + 0.5)``.  Rendering at resolution fraction ``r`` samples
the level-pixel centers ``((col + 0.5) / r, (row + 0.5) / r)``.

Images are ``(height, width, 3)`` float64 arrays with channels in [0, 1].
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from . import _kernels
from .model import Splat2D, Splats

ALPHA_MIN = _kernels.ALPHA_MIN
ALPHA_MAX = _kernels.ALPHA_MAX


class RasterError(ValueError):
    pass


def configure_threads(n: int | None = None) -> int:
    """Cap rasterizer threads; defaults to the ``LAPIS_THREADS`` env var."""
    import numba

    if n is None:
        env = os.environ.get("LAPIS_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


configure_threads()


@dataclass
class SplatGrads:
    """Per-splat partials of a scalar loss, one row per input splat."""

    position: np.ndarray  # (n, 2)
    scale: np.ndarray  # (n, 2)
    rotation: np.ndarray  # (n,)
    color: np.ndarray  # (n, 3)
    opacity: np.ndarray  # (n,)

    @classmethod
    def from_packed(cls, g: np.ndarray) -> "SplatGrads":
        return cls(g[:, 0:2].copy(), g[:, 2:4].copy(), g[:, 4].copy(), g[:, 5:8].copy(), g[:, 8].copy())

    def packed(self) -> np.ndarray:
        return np.column_stack([self.position, self.scale, self.rotation, self.color, self.opacity])


def gaussian_weight(splat: Splat2D, pixel) -> float:
    """``exp(-0.5 d^T Sigma^-1 d)`` for ``d = pixel - position``."""
    cov = splat.covariance()
    if not np.all(np.isfinite(cov)):
        raise RasterError("non-finite covariance")
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(splat.position, dtype=np.float64)
    q = float(d @ np.linalg.solve(cov, d))
    return math.exp(-0.5 * q)


def _as_splats(splats) -> Splats:
    if isinstance(splats, Splats):
        return splats
    return Splats.from_list(list(splats))


def _shape(shape) -> tuple[int, int]:
    h, w = (int(v) for v in shape)
    if h <= 0 or w <= 0:
        raise RasterError(f"image dimensions must be positive, got {h}x{w}")
    return h, w


def _prepare(s: Splats, h: int, w: int, res: float):
    n = len(s)
    if not (np.all(np.isfinite(s.scales)) and np.all(s.scales > 0)
            and np.all(np.isfinite(s.positions)) and np.all(np.isfinite(s.rotations))):
        raise RasterError("non-finite or non-positive splat geometry")
    cth = np.cos(s.rotations)
    sth = np.sin(s.rotations)
    inv_s0 = 1.0 / s.scales[:, 0] ** 2
    inv_s1 = 1.0 / s.scales[:, 1] ** 2
    opac = s.opacities
    # conservative bounding box of the region where opacity * G >= 1/255
    visible = opac >= ALPHA_MIN
    qmax = np.where(visible, 2.0 * np.log(np.maximum(opac, ALPHA_MIN) / ALPHA_MIN), 0.0)
    var_x = cth**2 * s.scales[:, 0] ** 2 + sth**2 * s.scales[:, 1] ** 2
    var_y = sth**2 * s.scales[:, 0] ** 2 + cth**2 * s.scales[:, 1] ** 2
    ex = np.sqrt(qmax * var_x)
    ey = np.sqrt(qmax * var_y)
    # floor/ceil with one pixel of slack; the kernel re-tests alpha exactly.
    bx0 = np.floor(res * (s.positions[:, 0] - ex) - 0.5) - 1
    bx1 = np.ceil(res * (s.positions[:, 0] + ex) - 0.5) + 1
    by0 = np.floor(res * (s.positions[:, 1] - ey) - 0.5) - 1
    by1 = np.ceil(res * (s.positions[:, 1] + ey) - 0.5) + 1
    bx0 = np.clip(bx0, 0, w).astype(np.int64)
    bx1 = np.clip(bx1, -1, w - 1).astype(np.int64)
    by0 = np.clip(by0, 0, h).astype(np.int64)
    by1 = np.clip(by1, -1, h - 1).astype(np.int64)
    visible &= (bx0 <= bx1) & (by0 <= by1)
    # stable front-to-back order on (depth, index)
    order = np.lexsort((np.arange(n), s.depths))
    order = order[visible[order]].astype(np.int64)
    return cth, sth, inv_s0, inv_s1, opac, bx0, bx1, by0, by1, order


def _render_state(splats, shape, background, resolution):
    s = _as_splats(splats)
    h, w = _shape(shape)
    if not resolution > 0:
        raise RasterError("resolution must be positive")
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    prep = _prepare(s, h, w, float(resolution))
    img = np.empty((h, w, 3))
    t_final = np.empty((h, w))
    cth, sth, inv_s0, inv_s1, opac, bx0, bx1, by0, by1, order = prep
    _kernels.forward(
        np.ascontiguousarray(s.positions), cth, sth, inv_s0, inv_s1, np.ascontiguousarray(opac),
        np.ascontiguousarray(s.colors), order, bx0, bx1, by0, by1, h, w, float(resolution), bg,
        img, t_final,
    )
    return s, h, w, bg, prep, img, t_final


class RenderPass:
    """One forward pass whose compositing state is kept for ``backward``."""

    def __init__(self, splats, shape, background=(0.0, 0.0, 0.0), resolution: float = 1.0):
        s, h, w, bg, prep, img, t_final = _render_state(splats, shape, background, resolution)
        self.splats = s
        self.shape = (h, w)
        self.resolution = float(resolution)
        self._bg = bg
        self._prep = prep
        self._t_final = t_final
        self.image = np.clip(img, 0.0, 1.0)

    def backward(self, dl_dc: np.ndarray) -> SplatGrads:
        h, w = self.shape
        dl_dc = np.asarray(dl_dc, dtype=np.float64)
        if dl_dc.shape != (h, w, 3):
            raise RasterError(f"loss gradient shape {dl_dc.shape} does not match image {(h, w, 3)}")
        s = self.splats
        cth, sth, inv_s0, inv_s1, opac, bx0, bx1, by0, by1, order = self._prep
        nblocks = (h + _kernels.BLOCK_ROWS - 1) // _kernels.BLOCK_ROWS
        grads = np.zeros((nblocks, len(s), _kernels.NGRAD))
        if len(s):
            _kernels.backward(
                np.ascontiguousarray(s.positions), np.ascontiguousarray(s.scales), cth, sth, inv_s0, inv_s1,
                np.ascontiguousarray(opac), np.ascontiguousarray(s.colors), order, bx0, bx1, by0, by1,
                h, w, self.resolution, self._bg, self._t_final, np.ascontiguousarray(dl_dc), grads,
            )
        return SplatGrads.from_packed(grads.sum(axis=0))


def render(splats, shape, background=(0.0, 0.0, 0.0), resolution: float = 1.0) -> np.ndarray:
    """Composite splats front to back into a ``shape = (height, width)`` image.

    ``resolution`` is the scale fraction of the output relative to the splat
    frame; an image rendered at ``r`` covers the same extent as the full image.
    """
    return RenderPass(splats, shape, background, resolution).image


def render_backward(splats, shape, background, dl_dc: np.ndarray, resolution: float = 1.0) -> SplatGrads:
    """Exact gradient of ``sum(dl_dc * render(...))`` w.r.t. every splat parameter.

    The alpha clamp at 0.99 and the 1/255 skip are treated as zero-gradient
    regions.  Gradients are reported in the raw parameterization (scale as a
    standard deviation, rotation in radians, opacity in [0, 1]).
    """
    return RenderPass(splats, shape, background, resolution).backward(dl_dc)


def read_png(path) -> np.ndarray:
    """Load an 8-bit PNG as a float64 RGB image in [0, 1] (no gamma handling)."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
