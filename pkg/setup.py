"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed or skipped build only costs speed. Set
MEGA_SKIP_EXT=1 to skip the compile step entirely.
"""

import os
import sys

from setuptools import Extension, setup


def _extensions():
    if os.environ.get("MEGA_SKIP_EXT") == "1":
        return []
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError as exc:
        sys.stderr.write(f"mega: skipping compiled kernels ({exc})\n")
        return []
    ext = Extension(
        "mega._core",
        ["src/mega/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
