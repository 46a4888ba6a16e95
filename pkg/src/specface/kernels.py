"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names at the bottom of the module dispatch on ``USE_NUMBA``; the
``*_numba`` / ``*_numpy`` variants stay importable so the benchmark and the
equivalence tests can call both. Integer kernels (SplitMix64, histogram
counts) agree bit for bit across the two paths; the floating accumulations in
``face_geometry`` differ only in summation order.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_AREA_EPS = 1e-300


# ---------------------------------------------------------------------------
# SplitMix64
# ---------------------------------------------------------------------------

@njit(cache=True)
def splitmix64_numba(seed, n):
    out = np.empty(n, dtype=np.uint64)
    state = np.uint64(seed)
    gamma = np.uint64(SPLITMIX_GAMMA)
    m1 = np.uint64(_MIX1)
    m2 = np.uint64(_MIX2)
    s30 = np.uint64(30)
    s27 = np.uint64(27)
    s31 = np.uint64(31)
    for i in range(n):
        state = state + gamma
        z = state
        z = (z ^ (z >> s30)) * m1
        z = (z ^ (z >> s27)) * m2
        out[i] = z ^ (z >> s31)
    return out


def splitmix64_numpy(seed, n):
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed) + steps * np.uint64(SPLITMIX_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


# ---------------------------------------------------------------------------
# Per-face geometry accumulated onto vertices
# ---------------------------------------------------------------------------

@njit(cache=True)
def face_geometry_numba(vertices, faces):
    n = vertices.shape[0]
    normal_acc = np.zeros((n, 3))
    angle_sum = np.zeros(n)
    mixed_area = np.zeros(n)
    cot_lap = np.zeros((n, 3))
    for f in range(faces.shape[0]):
        ia = faces[f, 0]
        ib = faces[f, 1]
        ic = faces[f, 2]
        a = vertices[ia]
        b = vertices[ib]
        c = vertices[ic]
        ab = b - a
        ac = c - a
        bc = c - b
        cr = np.empty(3)
        cr[0] = ab[1] * ac[2] - ab[2] * ac[1]
        cr[1] = ab[2] * ac[0] - ab[0] * ac[2]
        cr[2] = ab[0] * ac[1] - ab[1] * ac[0]
        crn = np.sqrt(cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2])
        area = 0.5 * crn
        dot_a = ab[0] * ac[0] + ab[1] * ac[1] + ab[2] * ac[2]
        dot_b = -(ab[0] * bc[0] + ab[1] * bc[1] + ab[2] * bc[2])
        dot_c = ac[0] * bc[0] + ac[1] * bc[1] + ac[2] * bc[2]
        for k in range(3):
            normal_acc[ia, k] += cr[k]
            normal_acc[ib, k] += cr[k]
            normal_acc[ic, k] += cr[k]
        angle_sum[ia] += np.arctan2(crn, dot_a)
        angle_sum[ib] += np.arctan2(crn, dot_b)
        angle_sum[ic] += np.arctan2(crn, dot_c)
        if crn <= _AREA_EPS:
            continue
        cot_a = dot_a / crn
        cot_b = dot_b / crn
        cot_c = dot_c / crn
        if dot_a < 0.0:
            mixed_area[ia] += 0.5 * area
            mixed_area[ib] += 0.25 * area
            mixed_area[ic] += 0.25 * area
        elif dot_b < 0.0:
            mixed_area[ia] += 0.25 * area
            mixed_area[ib] += 0.5 * area
            mixed_area[ic] += 0.25 * area
        elif dot_c < 0.0:
            mixed_area[ia] += 0.25 * area
            mixed_area[ib] += 0.25 * area
            mixed_area[ic] += 0.5 * area
        else:
            lab = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]
            lac = ac[0] * ac[0] + ac[1] * ac[1] + ac[2] * ac[2]
            lbc = bc[0] * bc[0] + bc[1] * bc[1] + bc[2] * bc[2]
            mixed_area[ia] += (lab * cot_c + lac * cot_b) / 8.0
            mixed_area[ib] += (lab * cot_c + lbc * cot_a) / 8.0
            mixed_area[ic] += (lac * cot_b + lbc * cot_a) / 8.0
        for k in range(3):
            # edge ab is opposite c, ac opposite b, bc opposite a
            cot_lap[ia, k] += -cot_c * ab[k] - cot_b * ac[k]
            cot_lap[ib, k] += cot_c * ab[k] - cot_a * bc[k]
            cot_lap[ic, k] += cot_b * ac[k] + cot_a * bc[k]
    return normal_acc, angle_sum, mixed_area, cot_lap


def face_geometry_numpy(vertices, faces):
    n = vertices.shape[0]
    ia, ib, ic = faces[:, 0], faces[:, 1], faces[:, 2]
    a, b, c = vertices[ia], vertices[ib], vertices[ic]
    ab, ac, bc = b - a, c - a, c - b
    cr = np.cross(ab, ac)
    crn = np.sqrt(np.einsum("ij,ij->i", cr, cr))
    area = 0.5 * crn
    dot_a = np.einsum("ij,ij->i", ab, ac)
    dot_b = -np.einsum("ij,ij->i", ab, bc)
    dot_c = np.einsum("ij,ij->i", ac, bc)

    corner = np.concatenate([ia, ib, ic])

    def scatter(w):
        return np.bincount(corner, weights=w, minlength=n)

    normal_acc = np.stack([scatter(np.tile(cr[:, k], 3)) for k in range(3)], axis=1)
    angle_sum = scatter(np.concatenate([np.arctan2(crn, dot_a), np.arctan2(crn, dot_b), np.arctan2(crn, dot_c)]))

    ok = crn > _AREA_EPS
    safe = np.where(ok, crn, 1.0)
    cot_a = np.where(ok, dot_a / safe, 0.0)
    cot_b = np.where(ok, dot_b / safe, 0.0)
    cot_c = np.where(ok, dot_c / safe, 0.0)

    lab = np.einsum("ij,ij->i", ab, ab)
    lac = np.einsum("ij,ij->i", ac, ac)
    lbc = np.einsum("ij,ij->i", bc, bc)
    vor_a = (lab * cot_c + lac * cot_b) / 8.0
    vor_b = (lab * cot_c + lbc * cot_a) / 8.0
    vor_c = (lac * cot_b + lbc * cot_a) / 8.0
    obt_a, obt_b, obt_c = dot_a < 0.0, dot_b < 0.0, dot_c < 0.0
    any_obt = obt_a | obt_b | obt_c
    q = 0.25 * area
    area_a = np.where(any_obt, np.where(obt_a, 2 * q, q), vor_a)
    area_b = np.where(any_obt, np.where(obt_b, 2 * q, q), vor_b)
    area_c = np.where(any_obt, np.where(obt_c, 2 * q, q), vor_c)
    zero = np.zeros_like(area)
    mixed_area = scatter(np.concatenate([np.where(ok, area_a, zero), np.where(ok, area_b, zero), np.where(ok, area_c, zero)]))

    la = -cot_c[:, None] * ab - cot_b[:, None] * ac
    lb = cot_c[:, None] * ab - cot_a[:, None] * bc
    lc = cot_b[:, None] * ac + cot_a[:, None] * bc
    stacked = np.concatenate([la, lb, lc])
    cot_lap = np.stack([scatter(stacked[:, k]) for k in range(3)], axis=1)
    return normal_acc, angle_sum, mixed_area, cot_lap


# ---------------------------------------------------------------------------
# Fixed-bin histogram counts (per column, and joint per column pair)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _bin_index_numba(x, lo, hi, bins):
    if hi <= lo:
        return 0
    i = int(np.floor((x - lo) / (hi - lo) * bins))
    if i < 0:
        return 0
    if i >= bins:
        return bins - 1
    return i


@njit(cache=True)
def column_hist_numba(x, bins):
    n, d = x.shape
    counts = np.zeros((d, bins), dtype=np.int64)
    for j in range(d):
        lo = x[0, j]
        hi = x[0, j]
        for i in range(n):
            v = x[i, j]
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        for i in range(n):
            counts[j, _bin_index_numba(x[i, j], lo, hi, bins)] += 1
    return counts


@njit(cache=True)
def joint_hist_numba(x, y, bins):
    n, d = x.shape
    counts = np.zeros((d, bins, bins), dtype=np.int64)
    for j in range(d):
        xlo = x[0, j]
        xhi = x[0, j]
        ylo = y[0, j]
        yhi = y[0, j]
        for i in range(n):
            if x[i, j] < xlo:
                xlo = x[i, j]
            if x[i, j] > xhi:
                xhi = x[i, j]
            if y[i, j] < ylo:
                ylo = y[i, j]
            if y[i, j] > yhi:
                yhi = y[i, j]
        for i in range(n):
            a = _bin_index_numba(x[i, j], xlo, xhi, bins)
            b = _bin_index_numba(y[i, j], ylo, yhi, bins)
            counts[j, a, b] += 1
    return counts


def _bin_index_numpy(x, bins):
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    flat = span <= 0
    scaled = np.floor((x - lo) / np.where(flat, 1.0, span) * bins)
    idx = np.clip(scaled, 0, bins - 1).astype(np.int64)
    idx[:, flat] = 0
    return idx


def column_hist_numpy(x, bins):
    n, d = x.shape
    idx = _bin_index_numpy(x, bins)
    flat = idx + np.arange(d)[None, :] * bins
    return np.bincount(flat.ravel(), minlength=d * bins).reshape(d, bins).astype(np.int64)


def joint_hist_numpy(x, y, bins):
    n, d = x.shape
    ix = _bin_index_numpy(x, bins)
    iy = _bin_index_numpy(y, bins)
    flat = np.arange(d)[None, :] * bins * bins + ix * bins + iy
    return np.bincount(flat.ravel(), minlength=d * bins * bins).reshape(d, bins, bins).astype(np.int64)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    def splitmix64(seed, n):
        return splitmix64_numba(np.uint64(seed), int(n))

    def face_geometry(vertices, faces):
        return face_geometry_numba(
            np.ascontiguousarray(vertices, dtype=np.float64), np.ascontiguousarray(faces, dtype=np.int64)
        )

    def column_hist(x, bins):
        return column_hist_numba(np.ascontiguousarray(x, dtype=np.float64), int(bins))

    def joint_hist(x, y, bins):
        return joint_hist_numba(
            np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64), int(bins)
        )
else:
    def splitmix64(seed, n):
        return splitmix64_numpy(seed, int(n))

    def face_geometry(vertices, faces):
        return face_geometry_numpy(np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64))

    def column_hist(x, bins):
        return column_hist_numpy(np.asarray(x, dtype=np.float64), int(bins))

    def joint_hist(x, y, bins):
        return joint_hist_numpy(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), int(bins))
