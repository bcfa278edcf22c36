"""Build script for the optional compiled simulation core.

The package works without the extension (a pure-Python fallback is selected
at import time), so a failed compile only costs speed. ``QNCTRL_NO_EXT=1``
skips the build entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("QNCTRL_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "qnctrl._core._simcore",
                    ["src/qnctrl/_core/_simcore.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
