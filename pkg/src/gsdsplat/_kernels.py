"""Per-pixel compositing kernels.

Rows are processed independently and every per-Gaussian accumulation goes
into a per-row buffer that is reduced afterwards in row order, so results do
not depend on how rows are scheduled across threads.
"""
import numpy as np
from numba import njit, prange

W_MAX = 0.99
W_MIN = 1.0 / 255.0
ALPHA_EPS = 1e-4

# pair states recorded for frozen evaluation
SKIP, ACTIVE, CLIPPED = 0, 1, 2


@njit(cache=True, parallel=True)
def composite_forward(height, width, order, means, conics, colors, depths, opac, radius2,
                      frozen, state, record):
    n = order.shape[0]
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    dacc = np.zeros((height, width))
    for py in prange(height):
        cand = np.empty(n, dtype=np.int64)
        nc = 0
        for k in range(n):
            i = order[k]
            dy = py - means[i, 1]
            if frozen or dy * dy <= radius2[i]:
                cand[nc] = k
                nc += 1
        for px in range(width):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            a_acc = 0.0
            d_acc = 0.0
            for c in range(nc):
                k = cand[c]
                i = order[k]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                if frozen:
                    st = state[py, px, k]
                    if st == SKIP:
                        continue
                else:
                    if dx * dx + dy * dy > radius2[i]:
                        if record:
                            state[py, px, k] = SKIP
                        continue
                q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                w = opac[i] * np.exp(-0.5 * q)
                if frozen:
                    if st == CLIPPED:
                        w = W_MAX
                else:
                    if w < W_MIN:
                        if record:
                            state[py, px, k] = SKIP
                        continue
                    if w > W_MAX:
                        w = W_MAX
                        if record:
                            state[py, px, k] = CLIPPED
                    elif record:
                        state[py, px, k] = ACTIVE
                bw = w * T
                r += bw * colors[i, 0]
                g += bw * colors[i, 1]
                b += bw * colors[i, 2]
                a_acc += bw
                d_acc += bw * depths[i]
                T *= 1.0 - w
            rgb[py, px, 0] = r
            rgb[py, px, 1] = g
            rgb[py, px, 2] = b
            alpha[py, px] = a_acc
            dacc[py, px] = d_acc
    return rgb, alpha, dacc


@njit(cache=True, parallel=True)
def composite_backward(height, width, order, means, conics, colors, depths, opac, radius2,
                       g_rgb, g_dacc, g_alpha, n_gauss):
    """Adjoints of the compositing w.r.t. per-Gaussian screen-space quantities.

    Returns per-row buffers; column layout of ``acc``:
    0-1 mean2d, 2-5 conic (full 2x2, row-major), 6-8 color, 9 depth, 10 opacity.
    """
    n = order.shape[0]
    acc = np.zeros((height, n_gauss, 11))
    for py in prange(height):
        idx = np.empty(n, dtype=np.int64)
        ws = np.empty(n)
        gs = np.empty(n)
        clipped = np.empty(n, dtype=np.bool_)
        Ts = np.empty(n)
        cand = np.empty(n, dtype=np.int64)
        nc = 0
        for k in range(n):
            i = order[k]
            dy = py - means[i, 1]
            if dy * dy <= radius2[i]:
                cand[nc] = i
                nc += 1
        for px in range(width):
            m = 0
            T = 1.0
            for c in range(nc):
                i = cand[c]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                if dx * dx + dy * dy > radius2[i]:
                    continue
                q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                G = np.exp(-0.5 * q)
                w = opac[i] * G
                if w < W_MIN:
                    continue
                clipped[m] = w > W_MAX
                if clipped[m]:
                    w = W_MAX
                idx[m] = i
                ws[m] = w
                gs[m] = G
                Ts[m] = T
                T *= 1.0 - w
                m += 1
            gr = g_rgb[py, px, 0]
            gg = g_rgb[py, px, 1]
            gb = g_rgb[py, px, 2]
            gd = g_dacc[py, px]
            ga = g_alpha[py, px]
            suffix = 0.0
            for t in range(m - 1, -1, -1):
                i = idx[t]
                w = ws[t]
                bw = w * Ts[t]
                v = colors[i, 0] * gr + colors[i, 1] * gg + colors[i, 2] * gb + depths[i] * gd + ga
                acc[py, i, 6] += bw * gr
                acc[py, i, 7] += bw * gg
                acc[py, i, 8] += bw * gb
                acc[py, i, 9] += bw * gd
                dw = Ts[t] * v - suffix / (1.0 - w)
                suffix += bw * v
                if clipped[t]:
                    continue
                G = gs[t]
                acc[py, i, 10] += dw * G
                dq = -0.5 * dw * opac[i] * G
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                # q = d^T A d, dq/dmean = -2 A d
                acc[py, i, 0] += dq * (-2.0) * (conics[i, 0] * dx + conics[i, 1] * dy)
                acc[py, i, 1] += dq * (-2.0) * (conics[i, 1] * dx + conics[i, 2] * dy)
                acc[py, i, 2] += dq * dx * dx
                acc[py, i, 3] += dq * dx * dy
                acc[py, i, 4] += dq * dx * dy
                acc[py, i, 5] += dq * dy * dy
    return acc
