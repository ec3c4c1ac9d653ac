"""Numba tile kernels for compositing and its reverse pass.

All geometry is in camera space. A pixel's ray is r = ((x+.5-cx)/fx, (y+.5-cy)/fy, 1),
so the plane hit parameter equals the camera-space depth of the hit.

Per-entry gradient layout (one row per (tile, list position)):
  0:3 qc  3:6 t_u  6:9 t_v  9:12 facing normal  12 s_u  13 s_v  14:16 projected center
  16 alpha  17:20 c_a  20:23 c_b  then w[M], f[M], phi[M]
"""

import math

import numba
import numpy as np
from numba import njit, prange

# results do not depend on the layer; skip probing TBB, which warns on old installs
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

G_QC, G_TU, G_TV, G_N, G_SU, G_SV, G_MEAN, G_ALPHA, G_CA, G_CB, G_WAVES = 0, 3, 6, 9, 12, 13, 14, 16, 17, 20, 23
TWO_PI = 2.0 * math.pi
GAUSSIAN_ONLY = 4


@njit(cache=True, inline="always")
def _hit(k, rx, ry, pxc, pyc, qc, tu, tv, nf, su, sv, mean2d, two_s2):
    den = nf[k, 0] * rx + nf[k, 1] * ry + nf[k, 2]
    if abs(den) < 1e-12:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, True
    lam = (nf[k, 0] * qc[k, 0] + nf[k, 1] * qc[k, 1] + nf[k, 2] * qc[k, 2]) / den
    if not lam > 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, True
    d0 = lam * rx - qc[k, 0]
    d1 = lam * ry - qc[k, 1]
    d2 = lam - qc[k, 2]
    u = (tu[k, 0] * d0 + tu[k, 1] * d1 + tu[k, 2] * d2) / su[k]
    v = (tv[k, 0] * d0 + tv[k, 1] * d1 + tv[k, 2] * d2) / sv[k]
    g = math.exp(-(u * u + v * v) / 2.0)
    ddx = pxc - mean2d[k, 0]
    ddy = pyc - mean2d[k, 1]
    s = math.exp(-(ddx * ddx + ddy * ddy) / two_s2)
    if g >= s:
        return True, g, u, v, lam, ddx, ddy, den, True
    return True, s, u, v, lam, ddx, ddy, den, False


@njit(cache=True, inline="always")
def _color(k, u, v, ca, cb, w, f, phi, dirs, mode):
    if mode == GAUSSIAN_ONLY:
        return ca[k, 0], ca[k, 1], ca[k, 2]
    mix_a = 0.0
    mix_b = 0.0
    for i in range(w.shape[1]):
        th = TWO_PI * f[k, i] * (dirs[i, 0] * u + dirs[i, 1] * v) + phi[k, i]
        c = math.cos(th)
        mix_a += w[k, i] * ((1.0 + c) / 2.0)
        mix_b += w[k, i] * ((1.0 - c) / 2.0)
    return (
        mix_a * ca[k, 0] + mix_b * cb[k, 0],
        mix_a * ca[k, 1] + mix_b * cb[k, 1],
        mix_a * ca[k, 2] + mix_b * cb[k, 2],
    )


@njit(parallel=True, cache=True)
def forward_tiles(
    offsets, prims, tiles_x, tile_size, width, height, fx, fy, cx, cy,
    qc, tu, tv, nf, su, sv, mean2d, alpha, ca, cb, w, f, phi, dirs, mode,
    a_min, t_stop, two_s2,
    out_color, out_alpha, out_depth, out_normal, out_dist, out_count,
):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = offsets[t]
        end = offsets[t + 1]
        if start == end:
            continue
        wts = np.empty(end - start)
        zs = np.empty(end - start)
        ty = t // tiles_x
        tx = t % tiles_x
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                pxc = px + 0.5
                pyc = py + 0.5
                rx = (pxc - cx) / fx
                ry = (pyc - cy) / fy
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dep = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                dist = 0.0
                cnt = 0
                for e in range(start, end):
                    k = prims[e]
                    hit, ghat, u, v, lam, ddx, ddy, den, obj = _hit(
                        k, rx, ry, pxc, pyc, qc, tu, tv, nf, su, sv, mean2d, two_s2
                    )
                    if not hit:
                        continue
                    a = alpha[k] * ghat
                    if a < a_min:
                        continue
                    wt = a * trans
                    r, g, b = _color(k, u, v, ca, cb, w, f, phi, dirs, mode)
                    c0 += r * wt
                    c1 += g * wt
                    c2 += b * wt
                    dep += lam * wt
                    n0 += nf[k, 0] * wt
                    n1 += nf[k, 1] * wt
                    n2 += nf[k, 2] * wt
                    acc = 0.0
                    for j in range(cnt):
                        acc += wts[j] * abs(lam - zs[j])
                    dist += 2.0 * wt * acc
                    wts[cnt] = wt
                    zs[cnt] = lam
                    cnt += 1
                    trans *= 1.0 - a
                    if trans < t_stop:
                        break
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_alpha[py, px] = 1.0 - trans
                out_depth[py, px] = dep
                out_normal[py, px, 0] = n0
                out_normal[py, px, 1] = n1
                out_normal[py, px, 2] = n2
                out_dist[py, px] = dist
                out_count[py, px] = cnt


@njit(parallel=True, cache=True)
def backward_tiles(
    offsets, prims, tiles_x, tile_size, width, height, fx, fy, cx, cy,
    qc, tu, tv, nf, su, sv, mean2d, alpha, ca, cb, w, f, phi, dirs, mode,
    a_min, t_stop, two_s2,
    g_color, g_depth, g_normal, g_alpha, g_dist,
    entry_grads,
):
    n_tiles = offsets.shape[0] - 1
    m = w.shape[1]
    for t in prange(n_tiles):
        start = offsets[t]
        end = offsets[t + 1]
        if start == end:
            continue
        cap = end - start
        s_entry = np.empty(cap, dtype=np.int64)
        s_a = np.empty(cap)
        s_t = np.empty(cap)
        s_ghat = np.empty(cap)
        s_u = np.empty(cap)
        s_v = np.empty(cap)
        s_lam = np.empty(cap)
        s_ddx = np.empty(cap)
        s_ddy = np.empty(cap)
        s_den = np.empty(cap)
        s_obj = np.empty(cap, dtype=np.bool_)
        s_e = np.empty(cap)
        ty = t // tiles_x
        tx = t % tiles_x
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                pxc = px + 0.5
                pyc = py + 0.5
                rx = (pxc - cx) / fx
                ry = (pyc - cy) / fy
                trans = 1.0
                cnt = 0
                for e in range(start, end):
                    k = prims[e]
                    hit, ghat, u, v, lam, ddx, ddy, den, obj = _hit(
                        k, rx, ry, pxc, pyc, qc, tu, tv, nf, su, sv, mean2d, two_s2
                    )
                    if not hit:
                        continue
                    a = alpha[k] * ghat
                    if a < a_min:
                        continue
                    s_entry[cnt] = e
                    s_a[cnt] = a
                    s_t[cnt] = trans
                    s_ghat[cnt] = ghat
                    s_u[cnt] = u
                    s_v[cnt] = v
                    s_lam[cnt] = lam
                    s_ddx[cnt] = ddx
                    s_ddy[cnt] = ddy
                    s_den[cnt] = den
                    s_obj[cnt] = obj
                    cnt += 1
                    trans *= 1.0 - a
                    if trans < t_stop:
                        break
                if cnt == 0:
                    continue
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth[py, px]
                gn0 = g_normal[py, px, 0]
                gn1 = g_normal[py, px, 1]
                gn2 = g_normal[py, px, 2]
                ga_img = g_alpha[py, px]
                gdist = g_dist[py, px]
                # dL/d(weight_k) for weight_k = a_k T_k
                for i in range(cnt):
                    k = prims[s_entry[i]]
                    r, g, b = _color(k, s_u[i], s_v[i], ca, cb, w, f, phi, dirs, mode)
                    ev = gc0 * r + gc1 * g + gc2 * b + gd * s_lam[i] + ga_img
                    ev += gn0 * nf[k, 0] + gn1 * nf[k, 1] + gn2 * nf[k, 2]
                    if gdist != 0.0:
                        acc = 0.0
                        for j in range(cnt):
                            acc += s_a[j] * s_t[j] * abs(s_lam[i] - s_lam[j])
                        ev += gdist * 2.0 * acc
                    s_e[i] = ev
                rest = 0.0
                for i in range(cnt - 1, -1, -1):
                    e = s_entry[i]
                    k = prims[e]
                    a = s_a[i]
                    wt = a * s_t[i]
                    g_a = s_t[i] * (s_e[i] - rest)
                    rest = s_e[i] * a + (1.0 - a) * rest
                    u = s_u[i]
                    v = s_v[i]
                    lam = s_lam[i]
                    row = entry_grads[e]
                    # color
                    gw0 = gc0 * wt
                    gw1 = gc1 * wt
                    gw2 = gc2 * wt
                    gu = 0.0
                    gv = 0.0
                    if mode == GAUSSIAN_ONLY:
                        row[G_CA] += gw0
                        row[G_CA + 1] += gw1
                        row[G_CA + 2] += gw2
                    else:
                        mix_a = 0.0
                        mix_b = 0.0
                        dca0 = ca[k, 0] - cb[k, 0]
                        dca1 = ca[k, 1] - cb[k, 1]
                        dca2 = ca[k, 2] - cb[k, 2]
                        for j in range(m):
                            proj = dirs[j, 0] * u + dirs[j, 1] * v
                            th = TWO_PI * f[k, j] * proj + phi[k, j]
                            c = math.cos(th)
                            sn = math.sin(th)
                            ha = (1.0 + c) / 2.0
                            hb = (1.0 - c) / 2.0
                            mix_a += w[k, j] * ha
                            mix_b += w[k, j] * hb
                            row[G_WAVES + j] += (
                                gw0 * (ca[k, 0] * ha + cb[k, 0] * hb)
                                + gw1 * (ca[k, 1] * ha + cb[k, 1] * hb)
                                + gw2 * (ca[k, 2] * ha + cb[k, 2] * hb)
                            )
                            g_th = -0.5 * w[k, j] * sn * (gw0 * dca0 + gw1 * dca1 + gw2 * dca2)
                            row[G_WAVES + m + j] += g_th * TWO_PI * proj
                            row[G_WAVES + 2 * m + j] += g_th
                            gu += g_th * TWO_PI * f[k, j] * dirs[j, 0]
                            gv += g_th * TWO_PI * f[k, j] * dirs[j, 1]
                        row[G_CA] += gw0 * mix_a
                        row[G_CA + 1] += gw1 * mix_a
                        row[G_CA + 2] += gw2 * mix_a
                        row[G_CB] += gw0 * mix_b
                        row[G_CB + 1] += gw1 * mix_b
                        row[G_CB + 2] += gw2 * mix_b
                    # depth (expected depth + distortion)
                    g_lam = gd * wt
                    if gdist != 0.0:
                        acc = 0.0
                        for j in range(cnt):
                            dz = lam - s_lam[j]
                            if dz > 0.0:
                                acc += s_a[j] * s_t[j]
                            elif dz < 0.0:
                                acc -= s_a[j] * s_t[j]
                        g_lam += gdist * 2.0 * wt * acc
                    # blended normal
                    row[G_N] += gn0 * wt
                    row[G_N + 1] += gn1 * wt
                    row[G_N + 2] += gn2 * wt
                    # opacity and falloff
                    ghat = s_ghat[i]
                    row[G_ALPHA] += g_a * ghat
                    g_ghat = g_a * alpha[k]
                    if s_obj[i]:
                        gu -= g_ghat * u * ghat
                        gv -= g_ghat * v * ghat
                    else:
                        scale = g_ghat * 2.0 * ghat / two_s2
                        row[G_MEAN] += scale * s_ddx[i]
                        row[G_MEAN + 1] += scale * s_ddy[i]
                    # local coordinates -> splat frame
                    sui = su[k]
                    svi = sv[k]
                    d0 = lam * rx - qc[k, 0]
                    d1 = lam * ry - qc[k, 1]
                    d2 = lam - qc[k, 2]
                    gd0 = gu * tu[k, 0] / sui + gv * tv[k, 0] / svi
                    gd1 = gu * tu[k, 1] / sui + gv * tv[k, 1] / svi
                    gd2 = gu * tu[k, 2] / sui + gv * tv[k, 2] / svi
                    row[G_TU] += gu * d0 / sui
                    row[G_TU + 1] += gu * d1 / sui
                    row[G_TU + 2] += gu * d2 / sui
                    row[G_TV] += gv * d0 / svi
                    row[G_TV + 1] += gv * d1 / svi
                    row[G_TV + 2] += gv * d2 / svi
                    row[G_SU] -= gu * u / sui
                    row[G_SV] -= gv * v / svi
                    g_lam += gd0 * rx + gd1 * ry + gd2
                    den = s_den[i]
                    g_num = g_lam / den
                    g_den = -g_lam * lam / den
                    row[G_N] += g_num * qc[k, 0] + g_den * rx
                    row[G_N + 1] += g_num * qc[k, 1] + g_den * ry
                    row[G_N + 2] += g_num * qc[k, 2] + g_den
                    row[G_QC] += g_num * nf[k, 0] - gd0
                    row[G_QC + 1] += g_num * nf[k, 1] - gd1
                    row[G_QC + 2] += g_num * nf[k, 2] - gd2


@njit(cache=True)
def reduce_entries(prims, entry_grads, n_prims):
    """Sum entry rows into per-primitive rows in flat (tile-major) order."""
    out = np.zeros((n_prims, entry_grads.shape[1]))
    for e in range(prims.shape[0]):
        k = prims[e]
        for c in range(entry_grads.shape[1]):
            out[k, c] += entry_grads[e, c]
    return out
