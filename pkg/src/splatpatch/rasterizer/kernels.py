"""Numba kernels for tile-based splat compositing, forward and backward.

All scalar tuning constants arrive through a `params` vector of the working
dtype so the float32 and float64 paths share one code path. Tiles own
disjoint pixel blocks, so the parallel loops are bit-deterministic for any
thread count; the backward kernel writes per-(tile, entry) gradient rows that
the caller reduces in fixed tile order.
"""

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

# workqueue is always available and fork-safe; tiles write disjoint pixels so
# the layer choice cannot affect results
_numba_config.THREADING_LAYER = "workqueue"

# params vector layout
P_FLOOR = 0      # transmittance floor (early stop)
P_CLAMP = 1      # alpha clamp max
P_INV2SIG2 = 2   # 1 / (2 * lowpass_sigma^2)
P_R2CUT = 3      # squared local-radius cutoff (weight below ~1e-11)
P_DNEPS = 4      # grazing-incidence |d.n| threshold
P_ONE = 5
P_HALF = 6
P_ALPHAMIN = 7   # negligible-alpha skip
N_PARAMS = 8

# gradient buffer column layout (per tile entry)
G_POS = 0        # 3
G_SU = 3
G_SV = 4
G_OPA = 5
G_SH = 6         # 27
G_TU = 33        # 3
G_TV = 36        # 3
G_NH = 39        # 3
G_UC = 42
G_VC = 43
N_GRAD = 44


@njit(cache=True)
def bin_tiles(ucs, vcs, radius, width, height, tile, ntx, nty):
    """CSR tile lists: entries are slot ids in depth order within each tile."""
    s = ucs.shape[0]
    ntiles = ntx * nty
    bbox = np.empty((s, 4), dtype=np.int64)
    counts = np.zeros(ntiles, dtype=np.int64)
    for i in range(s):
        x0 = ucs[i] - radius[i]
        x1 = ucs[i] + radius[i]
        y0 = vcs[i] - radius[i]
        y1 = vcs[i] + radius[i]
        if x1 < 0.0 or x0 > width or y1 < 0.0 or y0 > height:
            bbox[i, 0] = 1
            bbox[i, 1] = 0
            bbox[i, 2] = 1
            bbox[i, 3] = 0
            continue
        tx0 = max(int(np.floor(x0 / tile)), 0)
        tx1 = min(int(np.floor(x1 / tile)), ntx - 1)
        ty0 = max(int(np.floor(y0 / tile)), 0)
        ty1 = min(int(np.floor(y1 / tile)), nty - 1)
        bbox[i, 0] = tx0
        bbox[i, 1] = tx1
        bbox[i, 2] = ty0
        bbox[i, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    for t in range(ntiles):
        offsets[t + 1] = offsets[t] + counts[t]
    entries = np.empty(offsets[ntiles], dtype=np.int64)
    cursor = offsets[:ntiles].copy()
    for i in range(s):
        for ty in range(bbox[i, 2], bbox[i, 3] + 1):
            for tx in range(bbox[i, 0], bbox[i, 1] + 1):
                t = ty * ntx + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return offsets, entries


@njit(parallel=True, cache=True)
def forward_kernel(
    width, height, tile, ntx, nty,
    tile_offsets, tile_entries,
    origin, dirs, shb,
    pos, su, sv, opa, tu, tv, nh, sh, ucs, vcs, lp_active,
    bg, params, out_img,
):
    one = params[P_ONE]
    half = params[P_HALF]
    floor = params[P_FLOOR]
    clamp = params[P_CLAMP]
    inv2sig2 = params[P_INV2SIG2]
    r2cut = params[P_R2CUT]
    dn_eps = params[P_DNEPS]
    alpha_min = params[P_ALPHAMIN]
    zero = one - one
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t % ntx
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            for px in range(tx * tile, x_end):
                dx = dirs[py, px, 0]
                dy = dirs[py, px, 1]
                dz = dirs[py, px, 2]
                trans = one
                cr = zero
                cg = zero
                cb = zero
                for e in range(lo, hi):
                    i = tile_entries[e]
                    dn = dx * nh[i, 0] + dy * nh[i, 1] + dz * nh[i, 2]
                    if abs(dn) < dn_eps:
                        continue
                    num = (
                        (pos[i, 0] - origin[0]) * nh[i, 0]
                        + (pos[i, 1] - origin[1]) * nh[i, 1]
                        + (pos[i, 2] - origin[2]) * nh[i, 2]
                    )
                    thit = num / dn
                    if thit <= zero:
                        continue
                    qx = origin[0] + thit * dx - pos[i, 0]
                    qy = origin[1] + thit * dy - pos[i, 1]
                    qz = origin[2] + thit * dz - pos[i, 2]
                    a = (qx * tu[i, 0] + qy * tu[i, 1] + qz * tu[i, 2]) / su[i]
                    b = (qx * tv[i, 0] + qy * tv[i, 1] + qz * tv[i, 2]) / sv[i]
                    r2 = a * a + b * b
                    if lp_active[i] != 0:
                        ex = (px + half) - ucs[i]
                        ey = (py + half) - vcs[i]
                        wlp = np.exp(-(ex * ex + ey * ey) * inv2sig2)
                        wg = np.exp(-half * r2) if r2 < r2cut else zero
                        w = wg if wg >= wlp else wlp
                    else:
                        if r2 > r2cut:
                            continue
                        w = np.exp(-half * r2)
                    alpha = opa[i] * w
                    if alpha > clamp:
                        alpha = clamp
                    if alpha < alpha_min:
                        continue
                    c0 = zero
                    c1 = zero
                    c2 = zero
                    for k in range(9):
                        c0 += sh[i, k] * shb[py, px, k]
                        c1 += sh[i, 9 + k] * shb[py, px, k]
                        c2 += sh[i, 18 + k] * shb[py, px, k]
                    c0 = min(max(c0 + half, zero), one)
                    c1 = min(max(c1 + half, zero), one)
                    c2 = min(max(c2 + half, zero), one)
                    contrib = alpha * trans
                    cr += c0 * contrib
                    cg += c1 * contrib
                    cb += c2 * contrib
                    trans *= one - alpha
                    if trans < floor:
                        break
                out_img[py, px, 0] = min(max(cr + bg[0] * trans, zero), one)
                out_img[py, px, 1] = min(max(cg + bg[1] * trans, zero), one)
                out_img[py, px, 2] = min(max(cb + bg[2] * trans, zero), one)


@njit(parallel=True, cache=True)
def backward_kernel(
    width, height, tile, ntx, nty,
    tile_offsets, tile_entries,
    origin, dirs, shb,
    pos, su, sv, opa, tu, tv, nh, sh, ucs, vcs, lp_active,
    bg, params, d_img, gbuf,
):
    one = params[P_ONE]
    half = params[P_HALF]
    floor = params[P_FLOOR]
    clamp = params[P_CLAMP]
    inv2sig2 = params[P_INV2SIG2]
    r2cut = params[P_R2CUT]
    dn_eps = params[P_DNEPS]
    alpha_min = params[P_ALPHAMIN]
    zero = one - one
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t % ntx
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        cnt = hi - lo
        if cnt == 0:
            continue
        alpha_buf = np.empty(cnt, dtype=params.dtype)
        tbuf = np.empty(cnt, dtype=params.dtype)
        flag = np.empty(cnt, dtype=np.uint8)
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            for px in range(tx * tile, x_end):
                dx = dirs[py, px, 0]
                dy = dirs[py, px, 1]
                dz = dirs[py, px, 2]
                # pass 1: replicate forward compositing, record alpha and T
                trans = one
                nproc = 0
                for j in range(cnt):
                    i = tile_entries[lo + j]
                    fl = np.uint8(0)
                    alpha = zero
                    dn = dx * nh[i, 0] + dy * nh[i, 1] + dz * nh[i, 2]
                    if abs(dn) >= dn_eps:
                        num = (
                            (pos[i, 0] - origin[0]) * nh[i, 0]
                            + (pos[i, 1] - origin[1]) * nh[i, 1]
                            + (pos[i, 2] - origin[2]) * nh[i, 2]
                        )
                        thit = num / dn
                        if thit > zero:
                            qx = origin[0] + thit * dx - pos[i, 0]
                            qy = origin[1] + thit * dy - pos[i, 1]
                            qz = origin[2] + thit * dz - pos[i, 2]
                            a = (qx * tu[i, 0] + qy * tu[i, 1] + qz * tu[i, 2]) / su[i]
                            b = (qx * tv[i, 0] + qy * tv[i, 1] + qz * tv[i, 2]) / sv[i]
                            r2 = a * a + b * b
                            w = zero
                            if lp_active[i] != 0:
                                ex = (px + half) - ucs[i]
                                ey = (py + half) - vcs[i]
                                wlp = np.exp(-(ex * ex + ey * ey) * inv2sig2)
                                wg = np.exp(-half * r2) if r2 < r2cut else zero
                                if wg >= wlp:
                                    w = wg
                                    fl = np.uint8(1)
                                else:
                                    w = wlp
                                    fl = np.uint8(2)
                            elif r2 <= r2cut:
                                w = np.exp(-half * r2)
                                fl = np.uint8(1)
                            if fl != np.uint8(0):
                                alpha = opa[i] * w
                                if alpha > clamp:
                                    alpha = clamp
                                if alpha < alpha_min:
                                    fl = np.uint8(0)
                    alpha_buf[j] = alpha
                    tbuf[j] = trans
                    flag[j] = fl
                    nproc = j + 1
                    if fl != np.uint8(0):
                        trans *= one - alpha
                        if trans < floor:
                            break
                # pass 2: reverse sweep maintaining the suffix contribution R
                dl0 = d_img[py, px, 0]
                dl1 = d_img[py, px, 1]
                dl2 = d_img[py, px, 2]
                if dl0 == zero and dl1 == zero and dl2 == zero:
                    continue
                r0 = bg[0] * trans
                r1 = bg[1] * trans
                r2suf = bg[2] * trans
                for j in range(nproc - 1, -1, -1):
                    if flag[j] == np.uint8(0):
                        continue
                    i = tile_entries[lo + j]
                    alpha = alpha_buf[j]
                    tj = tbuf[j]
                    # recompute geometry and color (identical arithmetic)
                    dn = dx * nh[i, 0] + dy * nh[i, 1] + dz * nh[i, 2]
                    num = (
                        (pos[i, 0] - origin[0]) * nh[i, 0]
                        + (pos[i, 1] - origin[1]) * nh[i, 1]
                        + (pos[i, 2] - origin[2]) * nh[i, 2]
                    )
                    thit = num / dn
                    qx = origin[0] + thit * dx - pos[i, 0]
                    qy = origin[1] + thit * dy - pos[i, 1]
                    qz = origin[2] + thit * dz - pos[i, 2]
                    a = (qx * tu[i, 0] + qy * tu[i, 1] + qz * tu[i, 2]) / su[i]
                    b = (qx * tv[i, 0] + qy * tv[i, 1] + qz * tv[i, 2]) / sv[i]
                    r2 = a * a + b * b
                    if flag[j] == np.uint8(1):
                        w = np.exp(-half * r2)
                    else:
                        ex = (px + half) - ucs[i]
                        ey = (py + half) - vcs[i]
                        w = np.exp(-(ex * ex + ey * ey) * inv2sig2)
                    c0 = zero
                    c1 = zero
                    c2 = zero
                    for k in range(9):
                        c0 += sh[i, k] * shb[py, px, k]
                        c1 += sh[i, 9 + k] * shb[py, px, k]
                        c2 += sh[i, 18 + k] * shb[py, px, k]
                    c0r = c0 + half
                    c1r = c1 + half
                    c2r = c2 + half
                    c0c = min(max(c0r, zero), one)
                    c1c = min(max(c1r, zero), one)
                    c2c = min(max(c2r, zero), one)
                    contrib = alpha * tj
                    base = lo + j
                    # color gradient (zero where the channel clamped)
                    dsh0 = dl0 * contrib if (c0r > zero and c0r < one) else zero
                    dsh1 = dl1 * contrib if (c1r > zero and c1r < one) else zero
                    dsh2 = dl2 * contrib if (c2r > zero and c2r < one) else zero
                    if dsh0 != zero or dsh1 != zero or dsh2 != zero:
                        for k in range(9):
                            gbuf[base, G_SH + k] += dsh0 * shb[py, px, k]
                            gbuf[base, G_SH + 9 + k] += dsh1 * shb[py, px, k]
                            gbuf[base, G_SH + 18 + k] += dsh2 * shb[py, px, k]
                    # alpha gradient via suffix R
                    inv_om = one / (one - alpha)
                    dalpha = (
                        dl0 * (c0c * tj - r0 * inv_om)
                        + dl1 * (c1c * tj - r1 * inv_om)
                        + dl2 * (c2c * tj - r2suf * inv_om)
                    )
                    r0 += c0c * contrib
                    r1 += c1c * contrib
                    r2suf += c2c * contrib
                    if opa[i] * w > clamp:
                        continue  # clamped: no gradient through alpha
                    gbuf[base, G_OPA] += dalpha * w
                    dw = dalpha * opa[i]
                    if flag[j] == np.uint8(2):
                        # low-pass branch: gradient to the projected center
                        lpf = dw * w * inv2sig2
                        gbuf[base, G_UC] += lpf * ((px + half) - ucs[i]) * (one + one)
                        gbuf[base, G_VC] += lpf * ((py + half) - vcs[i]) * (one + one)
                        continue
                    da = -dw * w * a
                    db = -dw * w * b
                    da_su = da / su[i]
                    db_sv = db / sv[i]
                    gbuf[base, G_SU] += -da_su * a
                    gbuf[base, G_SV] += -db_sv * b
                    gbuf[base, G_TU] += da_su * qx
                    gbuf[base, G_TU + 1] += da_su * qy
                    gbuf[base, G_TU + 2] += da_su * qz
                    gbuf[base, G_TV] += db_sv * qx
                    gbuf[base, G_TV + 1] += db_sv * qy
                    gbuf[base, G_TV + 2] += db_sv * qz
                    # dL/dq and the chain through the hit parameter thit
                    dqx = da_su * tu[i, 0] + db_sv * tv[i, 0]
                    dqy = da_su * tu[i, 1] + db_sv * tv[i, 1]
                    dqz = da_su * tu[i, 2] + db_sv * tv[i, 2]
                    dthit = dqx * dx + dqy * dy + dqz * dz
                    inv_dn = one / dn
                    f = dthit * inv_dn
                    gbuf[base, G_POS] += f * nh[i, 0] - dqx
                    gbuf[base, G_POS + 1] += f * nh[i, 1] - dqy
                    gbuf[base, G_POS + 2] += f * nh[i, 2] - dqz
                    gbuf[base, G_NH] += -f * qx
                    gbuf[base, G_NH + 1] += -f * qy
                    gbuf[base, G_NH + 2] += -f * qz
