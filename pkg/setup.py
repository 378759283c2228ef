import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the compiled kernels must round exactly like the
# numpy fallback, so FMA contraction is disabled. No -ffast-math.
extensions = [
    Extension(
        "minidist._kernels._accel",
        ["src/minidist/_kernels/_accel.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
)
