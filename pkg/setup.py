"""Build script for the optional compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so compilation failures are non-fatal.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "splinecnn.kernels._convops",
                ["src/splinecnn/kernels/_convops.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
