# cython: language_level=3
"""Compiled float32 inner loops.

Two kernels carry essentially all the arithmetic in this package: the
elementwise accumulate used by every reduction step, and the fused
scaled-subtract used by the weight update. Both must produce bit-exact
matches with the numpy fallback, which is why the build turns off FP
contraction: a fused multiply-add would round differently.
"""


def add_f32(float[::1] dst, const float[::1] src):
    """dst += src, elementwise. Lengths must match."""
    cdef Py_ssize_t i, n = dst.shape[0]
    if src.shape[0] != n:
        raise ValueError(f"length mismatch: {n} != {src.shape[0]}")
    with nogil:
        for i in range(n):
            dst[i] += src[i]


def sub_scaled_f32(float[::1] dst, const float[::1] src, float c):
    """dst -= c * src, elementwise. Lengths must match."""
    cdef Py_ssize_t i, n = dst.shape[0]
    if src.shape[0] != n:
        raise ValueError(f"length mismatch: {n} != {src.shape[0]}")
    with nogil:
        for i in range(n):
            dst[i] -= c * src[i]
