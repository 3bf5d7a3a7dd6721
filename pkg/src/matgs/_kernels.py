"""Tile-binned forward/backward kernels for the surfel rasterizer.

All geometry is in camera space with unnormalized pixel rays (X, Y, 1), so the
ray parameter of a hit equals its view-space depth.
"""

import math
import os

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is often too old and numba warns on every launch
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

NEAR = 0.01
T_MIN = 1e-4
ALPHA_EPS = 1e-4
PARALLEL_EPS = 1e-9
# falloff windows, in squared units of the respective standard deviation
FADE_START = 6.25
FADE_END = 9.0
SCREEN_VAR = 0.5  # (sqrt(2)/2 px)^2
TILE = 16


@nb.njit(cache=True, inline="always")
def _window(r2):
    if r2 <= FADE_START:
        return 1.0, 0.0
    if r2 >= FADE_END:
        return 0.0, 0.0
    s = (FADE_END - r2) / (FADE_END - FADE_START)
    w = s * s * s * (s * (6.0 * s - 15.0) + 10.0)
    return w, -30.0 * s * s * (1.0 - s) * (1.0 - s) / (FADE_END - FADE_START)


@nb.njit(cache=True, inline="always")
def _sample(px, py, X, Y, g, xc, tuc, tvc, nc, scales, mxy):
    """Evaluate one ray/surfel pair.

    Returns (ok, t, denom, u, v, G, wG, dwG, K, wK, dwK, d2, ddx, ddy).
    """
    nx, ny, nz = nc[g, 0], nc[g, 1], nc[g, 2]
    denom = X * nx + Y * ny + nz
    dnorm = math.sqrt(X * X + Y * Y + 1.0)
    if abs(denom) < PARALLEL_EPS * dnorm:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    numer = xc[g, 0] * nx + xc[g, 1] * ny + xc[g, 2] * nz
    t = numer / denom
    if t <= 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    q0 = t * X - xc[g, 0]
    q1 = t * Y - xc[g, 1]
    q2 = t - xc[g, 2]
    u = (q0 * tuc[g, 0] + q1 * tuc[g, 1] + q2 * tuc[g, 2]) / scales[g, 0]
    v = (q0 * tvc[g, 0] + q1 * tvc[g, 1] + q2 * tvc[g, 2]) / scales[g, 1]
    r2 = u * u + v * v
    wG, dwG = _window(r2)
    G = math.exp(-0.5 * r2) if wG > 0.0 else 0.0
    ddx = px + 0.5 - mxy[g, 0]
    ddy = py + 0.5 - mxy[g, 1]
    d2 = ddx * ddx + ddy * ddy
    wK, dwK = _window(d2 / SCREEN_VAR)
    K = math.exp(-0.5 * d2 / SCREEN_VAR) if wK > 0.0 else 0.0
    return True, t, denom, u, v, G, wG, dwG, K, wK, dwK, d2, ddx, ddy


@nb.njit(cache=True, parallel=True)
def render_forward(height, width, fx, fy, cx, cy, xc, tuc, tvc, nc, nw, scales, opac, mat, mxy,
                   rect, tile_offsets, tile_ids, out_mat, out_alpha, out_dsum, out_nsum, out_dist,
                   out_count, out_state):
    """Composite every pixel; ``out_state`` encodes the discrete branch choices
    (early termination, screen-kernel samples) that make the image non-smooth."""
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = len(tile_offsets) - 1
    for tile in nb.prange(n_tiles):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        if end == start:
            continue
        ty0 = (tile // tiles_x) * TILE
        tx0 = (tile % tiles_x) * TILE
        cap = end - start
        ws = np.empty(cap)
        zs = np.empty(cap)
        for py in range(ty0, min(ty0 + TILE, height)):
            Y = (py + 0.5 - cy) / fy
            for px in range(tx0, min(tx0 + TILE, width)):
                X = (px + 0.5 - cx) / fx
                T = 1.0
                n = 0
                state = 0
                for k in range(start, end):
                    g = tile_ids[k]
                    if px < rect[g, 0] or px > rect[g, 1] or py < rect[g, 2] or py > rect[g, 3]:
                        continue
                    ok, t, denom, u, v, G, wG, dwG, K, wK, dwK, d2, ddx, ddy = _sample(
                        px, py, X, Y, g, xc, tuc, tvc, nc, scales, mxy)
                    if not ok:
                        continue
                    gh = max(G * wG, K * wK)
                    if gh <= 0.0:
                        continue
                    if K * wK > G * wG:
                        state += 2 * (g + 1)
                    a = opac[g] * gh
                    w = a * T
                    for c in range(5):
                        out_mat[py, px, c] += w * mat[g, c]
                    s = -1.0 if denom > 0.0 else 1.0
                    for c in range(3):
                        out_nsum[py, px, c] += w * s * nw[g, c]
                    out_alpha[py, px] += w
                    out_dsum[py, px] += w * t
                    ws[n] = w
                    zs[n] = t
                    n += 1
                    T *= 1.0 - a
                    if T < T_MIN:
                        state += 1
                        break
                out_count[py, px] = n
                # ordered-pair distortion sum_ij w_i w_j |z_i - z_j|
                dist = 0.0
                for i in range(n):
                    acc = 0.0
                    for j in range(i):
                        acc += ws[j] * abs(zs[i] - zs[j])
                        if zs[j] > zs[i]:
                            state += 4 * (i * 7919 + j + 1)
                    dist += ws[i] * acc
                out_dist[py, px] = 2.0 * dist
                out_state[py, px] = state


@nb.njit(cache=True, parallel=True)
def render_backward(height, width, fx, fy, cx, cy, xc, tuc, tvc, nc, nw, scales, opac, mat, mxy,
                    rect, tile_offsets, tile_ids, g_cpix, g_apix, g_dpix, g_npix, w_dist,
                    acc_xc, acc_tu, acc_tv, acc_nc, acc_nw, acc_s, acc_op, acc_mat):
    """Accumulate parameter gradients given per-pixel upstream gradients.

    acc_* arrays carry a leading axis with one slot per tile row; each slot is
    written by exactly one worker, so the final reduction is order-fixed.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    for trow in nb.prange(tiles_y):
        cap = 1
        for tcol in range(tiles_x):
            tile = trow * tiles_x + tcol
            cap = max(cap, tile_offsets[tile + 1] - tile_offsets[tile])
        ids = np.empty(cap, np.int64)
        a_s = np.empty(cap)
        gh_s = np.empty(cap)
        w_s = np.empty(cap)
        T_s = np.empty(cap)
        z_s = np.empty(cap)
        den_s = np.empty(cap)
        u_s = np.empty(cap)
        v_s = np.empty(cap)
        G_s = np.empty(cap)
        wG_s = np.empty(cap)
        dwG_s = np.empty(cap)
        K_s = np.empty(cap)
        wK_s = np.empty(cap)
        dwK_s = np.empty(cap)
        dx_s = np.empty(cap)
        dy_s = np.empty(cap)
        br_s = np.empty(cap, np.bool_)
        e_s = np.empty(cap)
        for tcol in range(tiles_x):
            tile = trow * tiles_x + tcol
            start = tile_offsets[tile]
            end = tile_offsets[tile + 1]
            if end == start:
                continue
            ty0 = trow * TILE
            tx0 = tcol * TILE
            for py in range(ty0, min(ty0 + TILE, height)):
                Y = (py + 0.5 - cy) / fy
                for px in range(tx0, min(tx0 + TILE, width)):
                    X = (px + 0.5 - cx) / fx
                    T = 1.0
                    n = 0
                    for k in range(start, end):
                        g = tile_ids[k]
                        if px < rect[g, 0] or px > rect[g, 1] or py < rect[g, 2] or py > rect[g, 3]:
                            continue
                        ok, t, denom, u, v, G, wG, dwG, K, wK, dwK, d2, ddx, ddy = _sample(
                            px, py, X, Y, g, xc, tuc, tvc, nc, scales, mxy)
                        if not ok:
                            continue
                        gG = G * wG
                        gK = K * wK
                        gh = max(gG, gK)
                        if gh <= 0.0:
                            continue
                        a = opac[g] * gh
                        ids[n] = g
                        a_s[n] = a
                        gh_s[n] = gh
                        w_s[n] = a * T
                        T_s[n] = T
                        z_s[n] = t
                        den_s[n] = denom
                        u_s[n] = u
                        v_s[n] = v
                        G_s[n] = G
                        wG_s[n] = wG
                        dwG_s[n] = dwG
                        K_s[n] = K
                        wK_s[n] = wK
                        dwK_s[n] = dwK
                        dx_s[n] = ddx
                        dy_s[n] = ddy
                        br_s[n] = gG >= gK
                        n += 1
                        T *= 1.0 - a
                        if T < T_MIN:
                            break
                    if n == 0:
                        continue
                    gA = g_apix[py, px]
                    gD = g_dpix[py, px]
                    wd = w_dist[py, px]
                    # dL/dw_i
                    for i in range(n):
                        g = ids[i]
                        s = -1.0 if den_s[i] > 0.0 else 1.0
                        e = gA + gD * z_s[i]
                        for c in range(5):
                            e += g_cpix[py, px, c] * mat[g, c]
                        for c in range(3):
                            e += g_npix[py, px, c] * s * nw[g, c]
                        if wd != 0.0:
                            acc = 0.0
                            for j in range(n):
                                acc += w_s[j] * abs(z_s[i] - z_s[j])
                            e += 2.0 * wd * acc
                        e_s[i] = e
                    # back-to-front: S_k = sum_{i>k} e_i a_i prod_{k<j<i}(1 - a_j)
                    S = 0.0
                    for kk in range(n):
                        k = n - 1 - kk
                        g = ids[k]
                        ga = T_s[k] * (e_s[k] - S)
                        S = e_s[k] * a_s[k] + (1.0 - a_s[k]) * S
                        w = w_s[k]
                        s = -1.0 if den_s[k] > 0.0 else 1.0
                        for c in range(5):
                            acc_mat[trow, g, c] += w * g_cpix[py, px, c]
                        for c in range(3):
                            acc_nw[trow, g, c] += w * s * g_npix[py, px, c]
                        gz = w * gD
                        if wd != 0.0:
                            sgn = 0.0
                            for j in range(n):
                                if z_s[k] > z_s[j]:
                                    sgn += w_s[j]
                                elif z_s[k] < z_s[j]:
                                    sgn -= w_s[j]
                            gz += 2.0 * wd * w * sgn
                        op = opac[g]
                        acc_op[trow, g] += gh_s[k] * ga
                        ggh = op * ga
                        t = z_s[k]
                        denom = den_s[k]
                        q0 = t * X - xc[g, 0]
                        q1 = t * Y - xc[g, 1]
                        q2 = t - xc[g, 2]
                        gq0 = 0.0
                        gq1 = 0.0
                        gq2 = 0.0
                        if br_s[k]:
                            u = u_s[k]
                            v = v_s[k]
                            # d(G w)/d r2
                            gr2 = ggh * (G_s[k] * dwG_s[k] - 0.5 * G_s[k] * wG_s[k])
                            gu = 2.0 * u * gr2
                            gv = 2.0 * v * gr2
                            su = scales[g, 0]
                            sv = scales[g, 1]
                            gq0 = gu * tuc[g, 0] / su + gv * tvc[g, 0] / sv
                            gq1 = gu * tuc[g, 1] / su + gv * tvc[g, 1] / sv
                            gq2 = gu * tuc[g, 2] / su + gv * tvc[g, 2] / sv
                            acc_tu[trow, g, 0] += gu * q0 / su
                            acc_tu[trow, g, 1] += gu * q1 / su
                            acc_tu[trow, g, 2] += gu * q2 / su
                            acc_tv[trow, g, 0] += gv * q0 / sv
                            acc_tv[trow, g, 1] += gv * q1 / sv
                            acc_tv[trow, g, 2] += gv * q2 / sv
                            acc_s[trow, g, 0] += -gu * u / su
                            acc_s[trow, g, 1] += -gv * v / sv
                        else:
                            r = 1.0 / SCREEN_VAR
                            gd2 = ggh * r * (K_s[k] * dwK_s[k] - 0.5 * K_s[k] * wK_s[k])
                            gmx = -2.0 * dx_s[k] * gd2
                            gmy = -2.0 * dy_s[k] * gd2
                            iz = 1.0 / xc[g, 2]
                            acc_xc[trow, g, 0] += fx * iz * gmx
                            acc_xc[trow, g, 1] += fy * iz * gmy
                            acc_xc[trow, g, 2] += -(fx * xc[g, 0] * gmx + fy * xc[g, 1] * gmy) * iz * iz
                        gt = gq0 * X + gq1 * Y + gq2 + gz
                        acc_xc[trow, g, 0] -= gq0
                        acc_xc[trow, g, 1] -= gq1
                        acc_xc[trow, g, 2] -= gq2
                        gnum = gt / denom
                        gden = -gt * t / denom
                        acc_xc[trow, g, 0] += gnum * nc[g, 0]
                        acc_xc[trow, g, 1] += gnum * nc[g, 1]
                        acc_xc[trow, g, 2] += gnum * nc[g, 2]
                        acc_nc[trow, g, 0] += gnum * xc[g, 0] + gden * X
                        acc_nc[trow, g, 1] += gnum * xc[g, 1] + gden * Y
                        acc_nc[trow, g, 2] += gnum * xc[g, 2] + gden
