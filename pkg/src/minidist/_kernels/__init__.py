"""Hot float32 kernels: compiled extension when available, numpy otherwise.

Set MINIDIST_PURE_PYTHON=1 to force the numpy path. ``BACKEND`` reports
which implementation won; ``available_impls`` returns every importable
one so the kernel benchmark can compare them.
"""

import os

from minidist._kernels import fallback


def _load_accel():
    try:
        from minidist._kernels import _accel
    except ImportError:
        return None
    return _accel


if os.environ.get("MINIDIST_PURE_PYTHON") == "1":
    _impl = fallback
    BACKEND = "numpy"
else:
    _accel_mod = _load_accel()
    if _accel_mod is not None:
        _impl = _accel_mod
        BACKEND = "compiled"
    else:
        _impl = fallback
        BACKEND = "numpy"

add_f32 = _impl.add_f32
sub_scaled_f32 = _impl.sub_scaled_f32


def available_impls():
    """Map of implementation name -> module, for side-by-side timing."""
    impls = {"numpy": fallback}
    accel = _load_accel()
    if accel is not None:
        impls["compiled"] = accel
    return impls
