"""Compiled batch generation of stream variates for block samplers.

The per-stream path draws from one Philox generator at a time, which
costs a few microseconds of object and dispatch overhead per sample.
The kernels here produce the identical words for a whole block of
streams inside one jitted loop: the Philox-4x64-10 block function is
evaluated inline from each stream's key, word ``t`` of a stream is the
counter-``(t // 4) + 1`` block's lane ``t % 4`` (the generator steps its
counter before producing a block), a 53-bit draw is the word's top 53
bits, and normal variates go through the same compiled inverse-CDF
routine the vectorized special-function call uses, so every value is
bit-identical to the per-stream result.

Import is deferred by callers: pulling in the JIT compiler costs more
than a small batch, so only block-sized work should land here.
"""

from __future__ import annotations

import ctypes

import numpy as np
import scipy.special.cython_special as _cython_special
from numba import njit, uint64

_M0 = uint64(0xD2E7470EE14C6C93)
_M1 = uint64(0xCA5A826395121157)
_W0 = uint64(0x9E3779B97F4A7C15)
_W1 = uint64(0xBB67AE8584CAA73B)
_LOW32 = uint64(0xFFFFFFFF)
_S32 = uint64(32)
_S11 = uint64(11)

_INV_2_53 = 2.0**-53


def _ndtri_pointer():
    """The compiled inverse normal CDF, pulled from its exported capsule."""
    capsule = _cython_special.__pyx_capi__["ndtri"]
    get_name = ctypes.pythonapi.PyCapsule_GetName
    get_name.restype = ctypes.c_char_p
    get_name.argtypes = [ctypes.py_object]
    signature = get_name(capsule)
    if not signature.startswith(b"double (double"):
        raise ImportError(f"unexpected ndtri capsule signature {signature!r}")
    get_pointer = ctypes.pythonapi.PyCapsule_GetPointer
    get_pointer.restype = ctypes.c_void_p
    get_pointer.argtypes = [ctypes.py_object, ctypes.c_char_p]
    pointer = get_pointer(capsule, signature)
    if b"__pyx_skip_dispatch" in signature:
        return ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double, ctypes.c_int)(pointer), True
    return ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)(pointer), False


_NDTRI_C, _NDTRI_TAKES_FLAG = _ndtri_pointer()

if _NDTRI_TAKES_FLAG:

    @njit(inline="always")
    def _ndtri(u):
        # the trailing flag skips the interpreter-level dispatch check
        return _NDTRI_C(u, 1)

else:

    @njit(inline="always")
    def _ndtri(u):
        return _NDTRI_C(u)


@njit(inline="always")
def _mulhi(a, b):
    a_lo = a & _LOW32
    a_hi = a >> _S32
    b_lo = b & _LOW32
    b_hi = b >> _S32
    t = a_lo * b_lo
    w = a_hi * b_lo + (t >> _S32)
    x = a_lo * b_hi + (w & _LOW32)
    return a_hi * b_hi + (w >> _S32) + (x >> _S32)


@njit(inline="always")
def _philox_block(counter, k0, k1):
    """One Philox-4x64-10 block: four words at the given counter."""
    x0 = counter
    x1 = uint64(0)
    x2 = uint64(0)
    x3 = uint64(0)
    for r in range(10):
        kr0 = k0 + uint64(r) * _W0
        kr1 = k1 + uint64(r) * _W1
        hi0 = _mulhi(_M0, x0)
        lo0 = _M0 * x0
        hi1 = _mulhi(_M1, x2)
        lo1 = _M1 * x2
        x0 = hi1 ^ x1 ^ kr0
        x1 = lo1
        x2 = hi0 ^ x3 ^ kr1
        x3 = lo0
    return x0, x1, x2, x3


@njit(inline="always")
def _word(lane, x0, x1, x2, x3):
    if lane == uint64(0):
        return x0
    if lane == uint64(1):
        return x1
    if lane == uint64(2):
        return x2
    return x3


@njit
def fill_normals(keys, first_word, out):
    """Normal variates ``out[s, t]`` from word ``first_word + t`` of stream ``s``."""
    n_streams, n = out.shape
    for s in range(n_streams):
        k0 = keys[s, 0]
        k1 = keys[s, 1]
        cursor = uint64(first_word)
        block = (cursor >> uint64(2)) + uint64(1)
        lane = cursor & uint64(3)
        x0, x1, x2, x3 = _philox_block(block, k0, k1)
        for t in range(n):
            if lane == uint64(4):
                block += uint64(1)
                x0, x1, x2, x3 = _philox_block(block, k0, k1)
                lane = uint64(0)
            w = _word(lane, x0, x1, x2, x3)
            lane += uint64(1)
            out[s, t] = _ndtri((np.float64(w >> _S11) + 0.5) * _INV_2_53)


@njit
def fill_pair_quadratic(keys, first_word, ys, quad, cross, offset, out):
    """Rows of ``quad*(y*y - z0*z0) + cross*y*z1 + offset`` over normal pairs.

    Draw ``t`` of stream ``s`` consumes words ``first_word + 2t`` and
    ``first_word + 2t + 1`` as the pair ``(z0, z1)``, exactly as a
    two-normals-per-draw batch on the per-stream path does.
    """
    n_streams, n = out.shape
    for s in range(n_streams):
        k0 = keys[s, 0]
        k1 = keys[s, 1]
        y = ys[s]
        cursor = uint64(first_word)
        block = (cursor >> uint64(2)) + uint64(1)
        lane = cursor & uint64(3)
        x0, x1, x2, x3 = _philox_block(block, k0, k1)
        for t in range(n):
            if lane == uint64(4):
                block += uint64(1)
                x0, x1, x2, x3 = _philox_block(block, k0, k1)
                lane = uint64(0)
            w = _word(lane, x0, x1, x2, x3)
            lane += uint64(1)
            z0 = _ndtri((np.float64(w >> _S11) + 0.5) * _INV_2_53)
            if lane == uint64(4):
                block += uint64(1)
                x0, x1, x2, x3 = _philox_block(block, k0, k1)
                lane = uint64(0)
            w = _word(lane, x0, x1, x2, x3)
            lane += uint64(1)
            z1 = _ndtri((np.float64(w >> _S11) + 0.5) * _INV_2_53)
            out[s, t] = quad * (y * y - z0 * z0) + cross * y * z1 + offset
