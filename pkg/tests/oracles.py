"""Independent reference implementations used as test oracles.

Nothing here imports the package's rasterizer or SSIM; the renderer is a
direct transcription of front-to-back compositing and the loss uses
scikit-image's SSIM.
"""

import itertools
import math

import numpy as np
from skimage.metrics import structural_similarity

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99


def brute_render(params, shape, background=(0.0, 0.0, 0.0), resolution=1.0):
    """Composite splats given as rows ``[x, y, s0, s1, theta, r, g, b, opacity, depth]``.

    Returns the image and a per-(pixel, splat) code: 0 skipped, 1 blended,
    2 blended with the alpha clamp active.
    """
    params = np.asarray(params, dtype=np.float64)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5) / resolution
    py = (ys + 0.5) / resolution
    img = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    code = np.zeros((h, w, len(params)), dtype=np.int8)
    order = sorted(range(len(params)), key=lambda j: (params[j, 9], j))
    for j in order:
        x, y, s0, s1, th, r, g, b, op, _ = params[j]
        c, s = math.cos(th), math.sin(th)
        dx, dy = px - x, py - y
        u0 = c * dx + s * dy
        u1 = -s * dx + c * dy
        alpha = op * np.exp(-0.5 * (u0**2 / s0**2 + u1**2 / s1**2))
        used = alpha >= ALPHA_MIN
        clamp = used & (alpha > ALPHA_MAX)
        alpha = np.where(used, np.minimum(alpha, ALPHA_MAX), 0.0)
        code[..., j] = used.astype(np.int8) + clamp.astype(np.int8)
        wgt = alpha * trans
        img += wgt[..., None] * np.array([r, g, b])
        trans = trans * (1.0 - alpha)
    img += trans[..., None] * np.asarray(background, dtype=np.float64)
    return np.clip(img, 0.0, 1.0), code


def reference_ssim(a, b):
    return structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def reference_loss(a, b, lam=0.2):
    return lam * float(np.mean(np.abs(a - b))) + (1.0 - lam) * (1.0 - reference_ssim(a, b)) / 2.0


def fd_gradient(params, target, background, lam=0.2, h=1e-4):
    """Central differences of the reference loss in every splat parameter but depth.

    Returns ``None`` as soon as a stencil point changes the skip/clamp
    pattern or a residual sign, since the loss is not differentiable across
    those boundaries.
    """
    params = np.asarray(params, dtype=np.float64)
    base_img, base_code = brute_render(params, target.shape[:2], background)
    base_sign = np.sign(base_img - target)
    grad = np.zeros((len(params), 9))
    for j, k in itertools.product(range(len(params)), range(9)):
        vals = []
        for step in (h, -h):
            p = params.copy()
            p[j, k] += step
            img, code = brute_render(p, target.shape[:2], background)
            if not np.array_equal(code, base_code) or not np.array_equal(np.sign(img - target), base_sign):
                return None
            vals.append(reference_loss(img, target, lam))
        grad[j, k] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def brute_downsample(n_scores, keep):
    """Survivor indices by explicit sort on (-score, index), returned in original order."""
    ranked = sorted(range(len(n_scores)), key=lambda i: (-n_scores[i], i))
    return sorted(ranked[:keep])


def finish_time(times, kbps, start, nbytes):
    """When ``nbytes`` started at ``start`` are fully delivered, via cumulative bits.

    The cumulative delivery curve is tabulated at the sample times and
    inverted on the segment that crosses the target; inf if never reached.
    """
    if nbytes == 0:
        return start
    edges = list(times) + [math.inf]

    def delivered(t):
        total = 0.0
        for a, b, k in zip(edges, edges[1:], kbps):
            if t <= a:
                break
            span = min(t, b) - a
            total += k * 1000.0 * span if k else 0.0
        return total

    goal = delivered(start) + 8.0 * nbytes
    for a, b, k in zip(edges, edges[1:], kbps):
        if b <= start or k == 0:
            continue
        lo = max(a, start)
        if b == math.inf or delivered(b) >= goal:
            return lo + (goal - delivered(lo)) / (k * 1000.0)
    return math.inf


def play_schedule(sizes, times, kbps, deadline, levels):
    """Replay a fixed level schedule; returns per-window (bytes, duration, stall)."""
    held, clock, out = 0, 0.0, []
    for lvl in levels:
        nbytes = sum(sizes[held:lvl + 1])
        dur = finish_time(times, kbps, clock, nbytes) - clock
        out.append((nbytes, dur, max(dur - deadline, 0.0)))
        if dur == math.inf:
            break
        held = max(held, lvl + 1)
        clock += max(dur, deadline)
    return out


def no_stall_schedules(sizes, times, kbps, deadline, windows):
    """Every non-decreasing level schedule that never overruns a window."""
    n = len(sizes)
    found = []
    for levels in itertools.combinations_with_replacement(range(n), windows):
        rec = play_schedule(sizes, times, kbps, deadline, levels)
        if len(rec) == windows and all(s == 0 for _, _, s in rec):
            found.append(levels)
    return found


def predicted_choice(sizes, held, deadline, predicted_kbps):
    """Brute force over every level: the largest whose missing bytes fit, else the base."""
    budget = deadline * predicted_kbps * 1000.0
    fits = [lvl for lvl in range(len(sizes)) if 8.0 * sum(sizes[held:lvl + 1]) <= budget]
    return max(fits, default=0)
