"""Image pyramid construction, SSIM, and the L1 + D-SSIM training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePyramid:
    """Ground-truth images per level; ``full_shape`` is the full-resolution (h, w)."""

    levels: tuple[np.ndarray, ...]
    resolutions: tuple[float, ...]
    full_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.full_shape is None:
            object.__setattr__(self, "full_shape", tuple(self.levels[-1].shape[:2]))

    def __len__(self) -> int:
        return len(self.levels)


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _dyadic_exponent(r: float) -> int:
    k = round(-math.log2(r)) if r > 0 else -1
    if k < 0 or 2.0**-k != r:
        raise MetricError(f"scale {r} is not a power-of-two fraction")
    return k


def build_pyramid(full: np.ndarray, scales=(0.125, 0.25, 0.5, 1.0)) -> ImagePyramid:
    """Box-filtered pyramid; level ``i`` has ``ceil(full_dims * scales[i])`` pixels per axis.

    Odd sizes are edge-replicated to even before each halving.
    """
    full = np.asarray(full, dtype=np.float64)
    if full.ndim != 3 or full.shape[2] != 3 or full.shape[0] == 0 or full.shape[1] == 0:
        raise MetricError(f"expected a non-empty (h, w, 3) image, got shape {full.shape}")
    scales = tuple(float(s) for s in scales)
    if not scales or scales[-1] != 1.0 or any(b <= a for a, b in zip(scales, scales[1:])):
        raise MetricError(f"scales must be strictly increasing and end at 1: {scales}")
    exps = [_dyadic_exponent(s) for s in scales]
    by_exp = {0: full}
    cur = full
    for k in range(1, max(exps) + 1):
        cur = _halve(cur)
        by_exp[k] = cur
    return ImagePyramid(tuple(by_exp[k] for k in exps), scales)


def level_shape(full_shape, r: float) -> tuple[int, int]:
    """Pixel dimensions of a level at scale fraction ``r``."""
    k = _dyadic_exponent(r)
    h, w = full_shape
    f = 2**k
    return (-(-h // f), -(-w // f))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


_WIN = gaussian_window()


def _window_for(a: np.ndarray, shrink: bool) -> np.ndarray:
    k = min(a.shape[0], a.shape[1])
    if k >= SSIM_WINDOW:
        return _WIN
    if not shrink or k < 1:
        raise MetricError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {a.shape[:2]}")
    # tiny pyramid levels: largest odd window that fits, same sigma
    return gaussian_window(k - 1 + k % 2)


def _filter_valid(x: np.ndarray, win: np.ndarray = _WIN) -> np.ndarray:
    """Windowed means at every position where the window fits inside the image."""
    return _kernels.filter_valid(np.ascontiguousarray(x, dtype=np.float64), win)


def _filter_adjoint(g: np.ndarray, win: np.ndarray = _WIN) -> np.ndarray:
    return _kernels.filter_adjoint(np.ascontiguousarray(g, dtype=np.float64), win)


def _moments(a, b, win):
    return _filter_valid(np.concatenate([a, b, a * a, b * b, a * b], axis=2), win)


def ssim(a: np.ndarray, b: np.ndarray, *, shrink_window: bool = False) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows and channels.

    Images smaller than the window raise, unless ``shrink_window`` is set, in
    which case the largest odd window that fits is used instead.
    """
    a, b = _check_pair(a, b)
    win = _window_for(a, shrink_window)
    mom = _moments(a, b, win)
    total, _ = _kernels.ssim_map_partials(mom, a.shape[2], C1, C2, False)
    return total / (mom.shape[0] * mom.shape[1] * a.shape[2])


def ssim_value_and_grad(a: np.ndarray, b: np.ndarray, *, shrink_window: bool = False) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``.

    The map depends on ``a`` through the windowed moments E[a], E[a^2] and
    E[ab]; their partials are pulled back through the transposed window filter.
    """
    a, b = _check_pair(a, b)
    c = a.shape[2]
    win = _window_for(a, shrink_window)
    total, partials = _kernels.ssim_map_partials(_moments(a, b, win), c, C1, C2, True)
    value = total / (partials.shape[0] * partials.shape[1] * c)
    back = _filter_adjoint(partials, win)
    return value, back[:, :, :c] + 2.0 * a * back[:, :, c : 2 * c] + b * back[:, :, 2 * c :]


def ssim_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of ``ssim(a, b)`` with respect to ``a``."""
    return ssim_value_and_grad(a, b)[1]


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """``(1 - SSIM) / 2``; levels below the window size use a shrunken window."""
    return (1.0 - ssim(a, b, shrink_window=True)) / 2.0


def total_loss(rendered: np.ndarray, truth: np.ndarray, lam: float = 0.2) -> float:
    """``lam * L1 + (1 - lam) * D-SSIM`` with D-SSIM = (1 - SSIM) / 2."""
    if not 0.0 <= lam <= 1.0:
        raise MetricError(f"lambda must lie in [0, 1], got {lam}")
    return lam * l1(rendered, truth) + (1.0 - lam) * dssim(rendered, truth)


def total_loss_backward(rendered: np.ndarray, truth: np.ndarray, lam: float = 0.2) -> np.ndarray:
    """Per-pixel gradient of :func:`total_loss` with respect to ``rendered``."""
    return loss_and_grad(rendered, truth, lam)[1]


def loss_and_grad(rendered: np.ndarray, truth: np.ndarray, lam: float = 0.2) -> tuple[float, np.ndarray]:
    """:func:`total_loss` and its per-pixel gradient from one pass over the windows."""
    if not 0.0 <= lam <= 1.0:
        raise MetricError(f"lambda must lie in [0, 1], got {lam}")
    a, b = _check_pair(rendered, truth)
    diff = a - b
    grad = lam * np.sign(diff) / a.size
    s, sg = ssim_value_and_grad(a, b, shrink_window=True)
    loss = lam * float(np.mean(np.abs(diff))) + (1.0 - lam) * (1.0 - s) / 2.0
    if lam < 1.0:
        grad = grad - (1.0 - lam) * 0.5 * sg
    return loss, grad


def multiview_loss(renders, truths, lam: float = 0.2) -> float:
    """Loss summed over views, for callers with more than one view per level."""
    renders, truths = list(renders), list(truths)
    if len(renders) != len(truths):
        raise MetricError("need one ground-truth image per rendered view")
    return lam * sum(l1(r, t) for r, t in zip(renders, truths)) + (1.0 - lam) * sum(
        dssim(r, t) for r, t in zip(renders, truths)
    )
