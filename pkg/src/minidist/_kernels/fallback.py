"""Numpy fallbacks matching the compiled kernels bit for bit."""

import numpy as np


def add_f32(dst, src):
    """dst += src, elementwise. Lengths must match."""
    d = np.asarray(dst)
    s = np.asarray(src)
    if d.shape[0] != s.shape[0]:
        raise ValueError(f"length mismatch: {d.shape[0]} != {s.shape[0]}")
    d += s


def sub_scaled_f32(dst, src, c):
    """dst -= c * src, elementwise. Lengths must match."""
    d = np.asarray(dst)
    s = np.asarray(src)
    if d.shape[0] != s.shape[0]:
        raise ValueError(f"length mismatch: {d.shape[0]} != {s.shape[0]}")
    # multiply rounds to float32 first, then subtract: same two-step
    # rounding as the compiled loop (built without FP contraction).
    d -= np.float32(c) * s
