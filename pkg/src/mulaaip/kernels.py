"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``radius_pairs``, ``spherical_jn_table``, ``segment_sum``,
``segment_softmax``) dispatch to the numba versions unless
``MULAAIP_DISABLE_NUMBA`` is set. Both flavours are importable directly so the
tests and the benchmark can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

SMALL_X = 1e-4


# -- radius graph ------------------------------------------------------------

def radius_pairs_numpy(coords, cutoff):
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    mask = d2 <= cutoff * cutoff
    np.fill_diagonal(mask, False)
    i, j = np.nonzero(mask)
    return i.astype(np.int64), j.astype(np.int64)


@njit
def _radius_pairs_nb(coords, cutoff):
    n = coords.shape[0]
    c2 = cutoff * cutoff
    count = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = coords[i, 0] - coords[j, 0]
            dy = coords[i, 1] - coords[j, 1]
            dz = coords[i, 2] - coords[j, 2]
            if dx * dx + dy * dy + dz * dz <= c2:
                count += 1
    src = np.empty(count, dtype=np.int64)
    dst = np.empty(count, dtype=np.int64)
    k = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = coords[i, 0] - coords[j, 0]
            dy = coords[i, 1] - coords[j, 1]
            dz = coords[i, 2] - coords[j, 2]
            if dx * dx + dy * dy + dz * dz <= c2:
                src[k] = i
                dst[k] = j
                k += 1
    return src, dst


def radius_pairs_numba(coords, cutoff):
    return _radius_pairs_nb(np.ascontiguousarray(coords, dtype=np.float64), float(cutoff))


# -- spherical Bessel functions ----------------------------------------------
#
# j_0..j_lmax at many points. Branches: x == 0 exact, x < SMALL_X two-term
# series, x > lmax upward recurrence (stable for l < x), otherwise Miller
# downward recurrence normalised against whichever of j_0, j_1 is larger.

def _double_factorial_odd(lmax):
    out = np.ones(lmax + 1)
    for l in range(1, lmax + 1):
        out[l] = out[l - 1] * (2 * l + 1)
    return out


def spherical_jn_table_numpy(lmax, x):
    x = np.asarray(x, dtype=np.float64).ravel()
    out = np.zeros((x.size, lmax + 1))
    dfact = _double_factorial_odd(lmax)

    zero = x == 0.0
    out[zero, 0] = 1.0

    small = (~zero) & (x < SMALL_X)
    if small.any():
        xs = x[small]
        for l in range(lmax + 1):
            out[small, l] = xs**l / dfact[l] * (1.0 - xs * xs / (2.0 * (2 * l + 3)))

    up = (~zero) & (~small) & (x > lmax)
    if up.any():
        xu = x[up]
        s, c = np.sin(xu), np.cos(xu)
        out[up, 0] = s / xu
        if lmax >= 1:
            out[up, 1] = s / (xu * xu) - c / xu
        for l in range(1, lmax):
            out[up, l + 1] = (2 * l + 1) / xu * out[up, l] - out[up, l - 1]

    mid = (~zero) & (~small) & (x <= lmax)
    if mid.any():
        xm = x[mid]
        start = lmax + 20 + int(np.ceil(xm.max()))
        vals = np.zeros((xm.size, lmax + 1))
        f_next = np.zeros(xm.size)
        f = np.full(xm.size, 1e-30)
        for l in range(start, 0, -1):
            if l <= lmax:
                vals[:, l] = f
            f_prev = (2 * l + 1) / xm * f - f_next
            f_next, f = f, f_prev
            big = np.abs(f) > 1e250
            if big.any():
                f[big] *= 1e-250
                f_next[big] *= 1e-250
                vals[big] *= 1e-250
        vals[:, 0] = f
        j0 = np.sin(xm) / xm
        j1 = np.sin(xm) / (xm * xm) - np.cos(xm) / xm
        f1 = f_next if lmax < 1 else vals[:, 1]
        use0 = np.abs(j0) >= np.abs(j1)
        scale = np.where(use0, j0 / vals[:, 0], j1 / f1)
        out[mid] = vals * scale[:, None]
    return out


@njit
def _spherical_jn_nb(lmax, x):
    n = x.shape[0]
    out = np.zeros((n, lmax + 1))
    dfact = np.ones(lmax + 1)
    for l in range(1, lmax + 1):
        dfact[l] = dfact[l - 1] * (2 * l + 1)
    vals = np.zeros(lmax + 1)
    for k in range(n):
        xk = x[k]
        if xk == 0.0:
            out[k, 0] = 1.0
        elif xk < SMALL_X:
            for l in range(lmax + 1):
                out[k, l] = xk**l / dfact[l] * (1.0 - xk * xk / (2.0 * (2 * l + 3)))
        elif xk > lmax:
            s = np.sin(xk)
            c = np.cos(xk)
            out[k, 0] = s / xk
            if lmax >= 1:
                out[k, 1] = s / (xk * xk) - c / xk
            for l in range(1, lmax):
                out[k, l + 1] = (2 * l + 1) / xk * out[k, l] - out[k, l - 1]
        else:
            start = lmax + 20 + int(np.ceil(xk))
            f_next = 0.0
            f = 1e-30
            for l in range(lmax + 1):
                vals[l] = 0.0
            for l in range(start, 0, -1):
                if l <= lmax:
                    vals[l] = f
                f_prev = (2 * l + 1) / xk * f - f_next
                f_next = f
                f = f_prev
                if abs(f) > 1e250:
                    f *= 1e-250
                    f_next *= 1e-250
                    for m in range(lmax + 1):
                        vals[m] *= 1e-250
            vals[0] = f
            j0 = np.sin(xk) / xk
            j1 = np.sin(xk) / (xk * xk) - np.cos(xk) / xk
            f1 = f_next if lmax < 1 else vals[1]
            if abs(j0) >= abs(j1):
                scale = j0 / vals[0]
            else:
                scale = j1 / f1
            for l in range(lmax + 1):
                out[k, l] = vals[l] * scale
    return out


def spherical_jn_table_numba(lmax, x):
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).ravel())
    return _spherical_jn_nb(int(lmax), x)


# -- segment reductions ------------------------------------------------------

def segment_sum_numpy(values, segment_ids, num_segments):
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, segment_ids, values)
    return out


@njit
def _segment_sum_nb(values, segment_ids, num_segments):
    n, k = values.shape
    out = np.zeros((num_segments, k))
    for e in range(n):
        s = segment_ids[e]
        for c in range(k):
            out[s, c] += values[e, c]
    return out


def segment_sum_numba(values, segment_ids, num_segments):
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(values.shape[0], -1)
    out = _segment_sum_nb(np.ascontiguousarray(flat), np.asarray(segment_ids, dtype=np.int64), int(num_segments))
    return out.reshape((num_segments,) + values.shape[1:])


def segment_softmax_numpy(logits, segment_ids, num_segments):
    logits = np.asarray(logits, dtype=np.float64)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segment_ids, logits)
    ex = np.exp(logits - seg_max[segment_ids])
    denom = np.zeros(num_segments)
    np.add.at(denom, segment_ids, ex)
    return ex / denom[segment_ids]


@njit
def _segment_softmax_nb(logits, segment_ids, num_segments):
    n = logits.shape[0]
    seg_max = np.full(num_segments, -np.inf)
    for e in range(n):
        s = segment_ids[e]
        if logits[e] > seg_max[s]:
            seg_max[s] = logits[e]
    ex = np.empty(n)
    denom = np.zeros(num_segments)
    for e in range(n):
        s = segment_ids[e]
        ex[e] = np.exp(logits[e] - seg_max[s])
        denom[s] += ex[e]
    for e in range(n):
        ex[e] /= denom[segment_ids[e]]
    return ex


def segment_softmax_numba(logits, segment_ids, num_segments):
    return _segment_softmax_nb(
        np.ascontiguousarray(logits, dtype=np.float64),
        np.asarray(segment_ids, dtype=np.int64),
        int(num_segments),
    )


if USE_NUMBA:
    radius_pairs = radius_pairs_numba
    spherical_jn_table = spherical_jn_table_numba
    segment_sum = segment_sum_numba
    segment_softmax = segment_softmax_numba
else:
    radius_pairs = radius_pairs_numpy
    spherical_jn_table = spherical_jn_table_numpy
    segment_sum = segment_sum_numpy
    segment_softmax = segment_softmax_numpy
