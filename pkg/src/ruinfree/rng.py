"""Counter-based random streams for the Monte Carlo module.

Each path owns a stateless stream derived from (seed, path index); the
n-th variate is a pure function of (seed, path, counter), so results do
not depend on scheduling, chunking, or thread count.  The generator is
the SplitMix64 finalizer applied to an additive Weyl sequence; normals
come from the Acklam rational approximation of the inverse normal CDF
(max relative error about 1.15e-9, far below Monte Carlo resolution).
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_MIX1 = uint64(0xBF58476D1CE4E5B9)
_MIX2 = uint64(0x94D049BB133111EB)

# Acklam inverse-normal-CDF coefficients
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> uint64(30))) * _MIX1
    z = (z ^ (z >> uint64(27))) * _MIX2
    return z ^ (z >> uint64(31))


@njit(cache=True)
def path_key(seed, path):
    """Stream key for one path; a double finalize decorrelates adjacent
    path indices."""
    return mix64(mix64(uint64(seed) + _GOLDEN) + _GOLDEN * (uint64(path) + uint64(1)))


@njit(cache=True)
def uniform01(key, ctr):
    """ctr-th uniform of the stream, strictly inside (0, 1)."""
    z = mix64(key + _GOLDEN * uint64(ctr))
    return (float(z >> uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def normal_ppf(u):
    """Inverse standard normal CDF (Acklam)."""
    if u < _P_LOW:
        q = np.sqrt(-2.0 * np.log(u))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) /
                ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if u > 1.0 - _P_LOW:
        q = np.sqrt(-2.0 * np.log(1.0 - u))
        return -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) /
                 ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = u - 0.5
    s = q * q
    return ((((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * q /
            (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0))


@njit(cache=True)
def normal_at(key, ctr):
    return normal_ppf(uniform01(key, ctr))


@njit(cache=True)
def _fill_uniforms(seed, path, start, out):
    key = path_key(seed, path)
    for i in range(out.size):
        out[i] = uniform01(key, start + i)


def uniforms(seed: int, path: int, n: int, start: int = 0) -> np.ndarray:
    """Convenience view of one stream (used by diagnostics and tests)."""
    out = np.empty(n)
    _fill_uniforms(seed, path, start, out)
    return out


def normals(seed: int, path: int, n: int, start: int = 0) -> np.ndarray:
    u = uniforms(seed, path, n, start)
    return np.array([normal_ppf(x) for x in u])
