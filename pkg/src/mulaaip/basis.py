"""Spherical Fourier-Bessel edge encoders.

Three encoders turn raw geometry into features:

* ``encode_rbf(d)``           -> N values, sqrt(2/c) sin(n pi d / c) / d
* ``encode_sbf(d, a)``        -> M*N values, normalised j_l(z_ln d / c) * Y_l^0(a)
* ``encode_tbf(d, theta, phi)`` -> M*M*N values, same radial part times real Y_l^m

The smooth cutoff envelope multiplies the radial factor and can be switched
off. All encoders accept scalars or 1-D arrays and return ``(..., dim)``.

Real harmonics use associated Legendre functions *without* the
Condon-Shortley phase; for m > 0 the azimuthal factor is ``sqrt(2) cos(m theta)``,
for m < 0 it is ``sqrt(2) sin(|m| theta)``. Flattening order is l, then m
from -l to l, then n (fastest).
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels


class OutOfCutoffError(ValueError):
    pass


@dataclass(frozen=True)
class BasisConfig:
    cutoff: float = 10.0
    num_radial: int = 6
    num_spherical: int = 7
    envelope_exponent: int = 6
    envelope_enabled: bool = True

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if self.num_radial < 1 or self.num_spherical < 1:
            raise ValueError("num_radial and num_spherical must be >= 1")
        if self.envelope_exponent < 1:
            raise ValueError("envelope_exponent must be >= 1")

    @property
    def rbf_dim(self) -> int:
        return self.num_radial

    @property
    def sbf_dim(self) -> int:
        return self.num_spherical * self.num_radial

    @property
    def tbf_dim(self) -> int:
        return self.num_spherical**2 * self.num_radial

    def to_dict(self) -> dict:
        return asdict(self)


def spherical_bessel(l: int, x):
    """j_l(x) for scalar or array ``x >= 0``."""
    arr = np.asarray(x, dtype=np.float64)
    vals = kernels.spherical_jn_table(l, arr.ravel())[:, l]
    return float(vals[0]) if arr.ndim == 0 else vals.reshape(arr.shape)


def _bisect(f, a, b, tol=1e-12):
    fa = f(a)
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = f(m)
        if fm == 0.0:
            return m
        if (fa < 0) == (fm < 0):
            a, fa = m, fm
        else:
            b = m
        if b - a < tol:
            break
    return 0.5 * (a + b)


@functools.lru_cache(maxsize=None)
def _roots_table(lmax: int, count: int) -> tuple[tuple[float, ...], ...]:
    # roots of j_l interlace those of j_{l-1}, so each level brackets the next
    need = count + lmax
    levels = [tuple(np.pi * k for k in range(1, need + 1))]
    for l in range(1, lmax + 1):
        prev = levels[-1]
        f = lambda x, l=l: spherical_bessel(l, x)
        levels.append(tuple(_bisect(f, prev[k], prev[k + 1]) for k in range(len(prev) - 1)))
    return tuple(lv[:count] for lv in levels)


def bessel_roots(l: int, count: int) -> np.ndarray:
    """First ``count`` positive zeros of j_l."""
    if l < 0 or count < 1:
        raise ValueError("need l >= 0 and count >= 1")
    return np.array(_roots_table(l, count)[l])


def _legendre_table(lmax: int, x):
    """P_l^m(x), m >= 0, without Condon-Shortley phase. Returns {(l, m): array}."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = {}
    pmm = np.ones_like(x)
    for m in range(lmax + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * s
        P[(m, m)] = pmm
        if m + 1 <= lmax:
            P[(m + 1, m)] = x * (2 * m + 1) * pmm
        for l in range(m + 2, lmax + 1):
            P[(l, m)] = ((2 * l - 1) * x * P[(l - 1, m)] - (l + m - 1) * P[(l - 2, m)]) / (l - m)
    return P


def _norm(l, m):
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def real_sph_harm_all(lmax: int, theta, phi) -> np.ndarray:
    """All Y_l^m for l <= lmax; ``theta`` azimuth, ``phi`` polar. Shape (..., (lmax+1)^2)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    theta, phi = np.broadcast_arrays(theta, phi)
    P = _legendre_table(lmax, np.cos(phi))
    cols = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            base = _norm(l, am) * P[(l, am)]
            if m > 0:
                cols.append(math.sqrt(2.0) * base * np.cos(am * theta))
            elif m < 0:
                cols.append(math.sqrt(2.0) * base * np.sin(am * theta))
            else:
                cols.append(base)
    return np.stack(cols, axis=-1)


def spherical_harmonic(l: int, m: int, theta, phi):
    if abs(m) > l:
        raise ValueError("|m| must be <= l")
    vals = real_sph_harm_all(l, theta, phi)[..., l * l + (m + l)]
    return float(vals) if np.ndim(vals) == 0 else vals


def _zonal(lmax: int, angle) -> np.ndarray:
    """Y_l^0(angle) for l <= lmax, shape (..., lmax+1)."""
    x = np.cos(np.asarray(angle, dtype=np.float64))
    P = _legendre_table(lmax, x)
    return np.stack([_norm(l, 0) * P[(l, 0)] for l in range(lmax + 1)], axis=-1)


def envelope(x, p: int = 6):
    """Polynomial cutoff: 1 at 0, value and slope 0 at 1, 0 beyond."""
    x = np.asarray(x, dtype=np.float64)
    a = -(p + 1) * (p + 2) / 2.0
    b = p * (p + 2.0)
    c = -p * (p + 1) / 2.0
    xp = x**p
    u = 1.0 + a * xp + b * xp * x + c * xp * x * x
    out = np.where(x < 1.0, u, 0.0)
    return float(out) if out.ndim == 0 else out


def _check_d(d, cfg: BasisConfig):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d > cfg.cutoff):
        raise OutOfCutoffError(f"distance {float(np.max(d)):.4f} exceeds cutoff {cfg.cutoff}")
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return d


def _env(d, cfg):
    if not cfg.envelope_enabled:
        return np.ones_like(d)
    return np.asarray(envelope(d / cfg.cutoff, cfg.envelope_exponent))


def encode_rbf(d, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    d = _check_d(d, cfg)
    c = cfg.cutoff
    freq = np.arange(1, cfg.num_radial + 1) * np.pi / c
    arg = d[..., None] * freq
    # sin(k d)/d = k * sinc; series below the small-argument threshold
    small = arg < kernels.SMALL_X
    safe = np.where(small, 1.0, arg)
    sinc = np.where(small, 1.0 - arg * arg / 6.0, np.sin(safe) / safe)
    out = math.sqrt(2.0 / c) * freq * sinc
    return out * _env(d, cfg)[..., None]


@functools.lru_cache(maxsize=None)
def _radial_constants(num_spherical: int, num_radial: int, cutoff: float):
    lmax = num_spherical - 1
    roots = np.array(_roots_table(lmax, num_radial))  # (M, N)
    jnext = np.empty_like(roots)
    for l in range(num_spherical):
        jnext[l] = kernels.spherical_jn_table(l + 1, roots[l])[:, l + 1]
    norm = np.sqrt(2.0 / (cutoff**3 * jnext**2))
    roots.setflags(write=False)
    norm.setflags(write=False)
    return roots, norm


def _radial(d, cfg: BasisConfig) -> np.ndarray:
    """Normalised radial factors, shape (..., M, N), envelope applied."""
    roots, norm = _radial_constants(cfg.num_spherical, cfg.num_radial, float(cfg.cutoff))
    lmax = cfg.num_spherical - 1
    flat = d.reshape(-1)
    x = flat[:, None, None] * roots[None] / cfg.cutoff  # (E, M, N)
    table = kernels.spherical_jn_table(lmax, x.reshape(-1)).reshape(flat.size, cfg.num_spherical,
                                                                      cfg.num_radial, lmax + 1)
    l_idx = np.arange(cfg.num_spherical)
    jl = table[:, l_idx, :, l_idx].transpose(1, 0, 2)  # pick j_l for row l -> (E, M, N)
    rad = norm[None] * jl * _env(flat, cfg)[:, None, None]
    return rad.reshape(d.shape + (cfg.num_spherical, cfg.num_radial))


def encode_sbf(d, a, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    d = _check_d(d, cfg)
    a = np.asarray(a, dtype=np.float64)
    d, a = np.broadcast_arrays(d, a)
    rad = _radial(np.ascontiguousarray(d), cfg)
    ang = _zonal(cfg.num_spherical - 1, a)
    return (rad * ang[..., :, None]).reshape(d.shape + (cfg.sbf_dim,))


def encode_tbf(d, theta, phi, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    d = _check_d(d, cfg)
    d, theta, phi = np.broadcast_arrays(d, np.asarray(theta, float), np.asarray(phi, float))
    rad = _radial(np.ascontiguousarray(d), cfg)  # (..., M, N)
    M = cfg.num_spherical
    ylm = real_sph_harm_all(M - 1, theta, phi)  # (..., M^2)
    l_of = np.repeat(np.arange(M), 2 * np.arange(M) + 1)  # row l for each (l, m)
    out = rad[..., l_of, :] * ylm[..., :, None]
    return out.reshape(d.shape + (cfg.tbf_dim,))
