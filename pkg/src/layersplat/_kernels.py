# Numba kernels for the 2D splat rasterizer.
#
# Work is split into fixed blocks of BLOCK_ROWS image rows.  Each block is
# processed serially by one thread, and per-splat gradients are written to a
# per-block slot and reduced afterwards in block order, so results do not
# depend on the thread count.

import os

# the default layer probes TBB first and warns when the installed one is too old
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

BLOCK_ROWS = 8
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99

# gradient slots: position x/y, scale 0/1, rotation, color r/g/b, opacity
NGRAD = 9


@njit(cache=True, parallel=True)
def forward(mu, cth, sth, inv_s0, inv_s1, opac, col, order, bx0, bx1, by0, by1,
            height, width, res, bg, out, t_final):
    nblocks = (height + BLOCK_ROWS - 1) // BLOCK_ROWS
    for b in prange(nblocks):
        r0 = b * BLOCK_ROWS
        r1 = min(r0 + BLOCK_ROWS, height)
        for y in range(r0, r1):
            for x in range(width):
                t_final[y, x] = 1.0
                out[y, x, 0] = 0.0
                out[y, x, 1] = 0.0
                out[y, x, 2] = 0.0
        for k in range(order.shape[0]):
            j = order[k]
            ya = max(by0[j], r0)
            yb = min(by1[j], r1 - 1)
            if ya > yb:
                continue
            for y in range(ya, yb + 1):
                py = (y + 0.5) / res
                for x in range(bx0[j], bx1[j] + 1):
                    px = (x + 0.5) / res
                    dx = px - mu[j, 0]
                    dy = py - mu[j, 1]
                    u0 = cth[j] * dx + sth[j] * dy
                    u1 = -sth[j] * dx + cth[j] * dy
                    q = u0 * u0 * inv_s0[j] + u1 * u1 * inv_s1[j]
                    alpha = opac[j] * np.exp(-0.5 * q)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = alpha * t_final[y, x]
                    out[y, x, 0] += col[j, 0] * w
                    out[y, x, 1] += col[j, 1] * w
                    out[y, x, 2] += col[j, 2] * w
                    t_final[y, x] *= 1.0 - alpha
        for y in range(r0, r1):
            for x in range(width):
                t = t_final[y, x]
                out[y, x, 0] += t * bg[0]
                out[y, x, 1] += t * bg[1]
                out[y, x, 2] += t * bg[2]


@njit(cache=True, parallel=True)
def backward(mu, scales, cth, sth, inv_s0, inv_s1, opac, col, order, bx0, bx1, by0, by1,
             height, width, res, bg, t_final, dl_dc, grads):
    nblocks = (height + BLOCK_ROWS - 1) // BLOCK_ROWS
    for b in prange(nblocks):
        r0 = b * BLOCK_ROWS
        r1 = min(r0 + BLOCK_ROWS, height)
        nr = r1 - r0
        trans = np.empty((nr, width))
        behind = np.empty((nr, width, 3))
        for y in range(r0, r1):
            for x in range(width):
                t = t_final[y, x]
                trans[y - r0, x] = t
                behind[y - r0, x, 0] = t * bg[0]
                behind[y - r0, x, 1] = t * bg[1]
                behind[y - r0, x, 2] = t * bg[2]
        for k in range(order.shape[0] - 1, -1, -1):
            j = order[k]
            ya = max(by0[j], r0)
            yb = min(by1[j], r1 - 1)
            if ya > yb:
                continue
            g_mx = 0.0
            g_my = 0.0
            g_s0 = 0.0
            g_s1 = 0.0
            g_th = 0.0
            g_r = 0.0
            g_g = 0.0
            g_b = 0.0
            g_op = 0.0
            for y in range(ya, yb + 1):
                py = (y + 0.5) / res
                ly = y - r0
                for x in range(bx0[j], bx1[j] + 1):
                    px = (x + 0.5) / res
                    dx = px - mu[j, 0]
                    dy = py - mu[j, 1]
                    u0 = cth[j] * dx + sth[j] * dy
                    u1 = -sth[j] * dx + cth[j] * dy
                    q = u0 * u0 * inv_s0[j] + u1 * u1 * inv_s1[j]
                    gauss = np.exp(-0.5 * q)
                    alpha = opac[j] * gauss
                    if alpha < ALPHA_MIN:
                        continue
                    clamped = alpha > ALPHA_MAX
                    if clamped:
                        alpha = ALPHA_MAX
                    one_m = 1.0 - alpha
                    t_j = trans[ly, x] / one_m
                    gr = dl_dc[y, x, 0]
                    gg = dl_dc[y, x, 1]
                    gb = dl_dc[y, x, 2]
                    w = alpha * t_j
                    g_r += gr * w
                    g_g += gg * w
                    g_b += gb * w
                    dl_da = (gr * (col[j, 0] * t_j - behind[ly, x, 0] / one_m)
                             + gg * (col[j, 1] * t_j - behind[ly, x, 1] / one_m)
                             + gb * (col[j, 2] * t_j - behind[ly, x, 2] / one_m))
                    behind[ly, x, 0] += col[j, 0] * w
                    behind[ly, x, 1] += col[j, 1] * w
                    behind[ly, x, 2] += col[j, 2] * w
                    trans[ly, x] = t_j
                    if clamped:
                        continue
                    g_op += dl_da * gauss
                    dl_dq = -0.5 * gauss * opac[j] * dl_da
                    a0 = u0 * inv_s0[j]
                    a1 = u1 * inv_s1[j]
                    g_mx += dl_dq * -2.0 * (cth[j] * a0 - sth[j] * a1)
                    g_my += dl_dq * -2.0 * (sth[j] * a0 + cth[j] * a1)
                    g_s0 += dl_dq * -2.0 * u0 * a0 / scales[j, 0]
                    g_s1 += dl_dq * -2.0 * u1 * a1 / scales[j, 1]
                    g_th += dl_dq * 2.0 * u0 * u1 * (inv_s0[j] - inv_s1[j])
            grads[b, j, 0] = g_mx
            grads[b, j, 1] = g_my
            grads[b, j, 2] = g_s0
            grads[b, j, 3] = g_s1
            grads[b, j, 4] = g_th
            grads[b, j, 5] = g_r
            grads[b, j, 6] = g_g
            grads[b, j, 7] = g_b
            grads[b, j, 8] = g_op


@njit(cache=True, parallel=True)
def filter_valid(x, win):
    # separable correlation over axes 0 and 1, keeping fully-contained windows
    h, w, c = x.shape
    k = win.shape[0]
    oh = h - k + 1
    ow = w - k + 1
    tmp = np.zeros((oh, w, c))
    for i in prange(oh):
        for t in range(k):
            wt = win[t]
            for j in range(w):
                for ch in range(c):
                    tmp[i, j, ch] += wt * x[i + t, j, ch]
    out = np.zeros((oh, ow, c))
    for i in prange(oh):
        for j in range(ow):
            for t in range(k):
                wt = win[t]
                for ch in range(c):
                    out[i, j, ch] += wt * tmp[i, j + t, ch]
    return out


@njit(cache=True, parallel=True)
def filter_adjoint(g, win):
    # transpose of filter_valid: scatter each output back over its window
    oh, ow, c = g.shape
    k = win.shape[0]
    h = oh + k - 1
    w = ow + k - 1
    tmp = np.zeros((oh, w, c))
    for i in prange(oh):
        for j in range(ow):
            for t in range(k):
                wt = win[t]
                for ch in range(c):
                    tmp[i, j + t, ch] += wt * g[i, j, ch]
    out = np.zeros((h, w, c))
    for j0 in prange(w // 16 + 1):
        for j in range(j0 * 16, min(j0 * 16 + 16, w)):
            for i in range(oh):
                for t in range(k):
                    wt = win[t]
                    for ch in range(c):
                        out[i + t, j, ch] += wt * tmp[i, j, ch]
    return out


@njit(cache=True)
def ssim_map_partials(moments, c, c1, c2, want_grad):
    # moments holds windowed E[a], E[b], E[a^2], E[b^2], E[ab] stacked on the channel axis;
    # returns the SSIM map sum and d(map mean)/d(E[a], E[a^2], E[ab]) stacked the same way
    oh, ow, _ = moments.shape
    n = oh * ow * c
    total = 0.0
    back = np.zeros((oh, ow, 3 * c)) if want_grad else np.zeros((0, 0, 3 * c))
    for i in range(oh):
        for j in range(ow):
            for ch in range(c):
                mu_a = moments[i, j, ch]
                mu_b = moments[i, j, c + ch]
                var_a = moments[i, j, 2 * c + ch] - mu_a * mu_a
                var_b = moments[i, j, 3 * c + ch] - mu_b * mu_b
                cov = moments[i, j, 4 * c + ch] - mu_a * mu_b
                num1 = 2.0 * mu_a * mu_b + c1
                num2 = 2.0 * cov + c2
                den1 = mu_a * mu_a + mu_b * mu_b + c1
                den2 = var_a + var_b + c2
                s = num1 * num2 / (den1 * den2)
                total += s
                if want_grad:
                    d_cov = 2.0 * num1 / (den1 * den2)
                    d_var = -s / den2
                    d_mu = 2.0 * mu_b * num2 / (den1 * den2) - s * 2.0 * mu_a / den1
                    back[i, j, ch] = (d_mu - 2.0 * mu_a * d_var - mu_b * d_cov) / n
                    back[i, j, c + ch] = d_var / n
                    back[i, j, 2 * c + ch] = d_cov / n
    return total, back
