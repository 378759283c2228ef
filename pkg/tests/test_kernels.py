import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minidist import _kernels

floats = st.floats(-1e6, 1e6, width=32)


def impls():
    return sorted(_kernels.available_impls().items())


def test_backend_is_reported():
    assert _kernels.BACKEND in ("compiled", "numpy")
    assert "numpy" in _kernels.available_impls()


def test_add_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(1000).astype(np.float32)
    b = rng.standard_normal(1000).astype(np.float32)
    want = a + b
    for name, impl in impls():
        dst = a.copy()
        impl.add_f32(dst, b)
        assert np.array_equal(dst, want), name


def test_sub_scaled_matches_two_step_rounding():
    # reference rounds the product to float32 before subtracting, which
    # is the contract both implementations must honor
    rng = np.random.default_rng(1)
    a = rng.standard_normal(1000).astype(np.float32)
    b = rng.standard_normal(1000).astype(np.float32)
    for c in (0.0, 1.0, 1 / 3, 0.025, -7.5):
        want = a - np.float32(c) * b
        for name, impl in impls():
            dst = a.copy()
            impl.sub_scaled_f32(dst, b, c)
            assert np.array_equal(dst, want), (name, c)


def test_implementations_agree_bitwise():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(100003).astype(np.float32)
    b = rng.standard_normal(100003).astype(np.float32)
    outs_add, outs_sub = [], []
    for _, impl in impls():
        d = a.copy()
        impl.add_f32(d, b)
        outs_add.append(d)
        d = a.copy()
        impl.sub_scaled_f32(d, b, 0.0123)
        outs_sub.append(d)
    for o in outs_add[1:]:
        assert np.array_equal(o, outs_add[0])
    for o in outs_sub[1:]:
        assert np.array_equal(o, outs_sub[0])


def test_length_mismatch_raises():
    for _, impl in impls():
        with pytest.raises(ValueError):
            impl.add_f32(np.zeros(3, np.float32), np.zeros(4, np.float32))
        with pytest.raises(ValueError):
            impl.sub_scaled_f32(np.zeros(4, np.float32), np.zeros(3, np.float32), 1.0)


def test_empty_arrays_are_fine():
    e = np.zeros(0, np.float32)
    for _, impl in impls():
        impl.add_f32(e, e)
        impl.sub_scaled_f32(e, e, 2.0)


@given(st.lists(floats, min_size=1, max_size=50), st.data())
def test_add_property(values, data):
    a = np.array(values, dtype=np.float32)
    b = np.array(data.draw(st.lists(floats, min_size=len(a), max_size=len(a))), np.float32)
    want = a + b
    for name, impl in impls():
        dst = a.copy()
        impl.add_f32(dst, b)
        assert np.array_equal(dst, want), name


def test_pure_python_env_forces_fallback():
    out = subprocess.run(
        [sys.executable, "-c", "from minidist import _kernels; print(_kernels.BACKEND)"],
        env={"MINIDIST_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"},
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "numpy"
