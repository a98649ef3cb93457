"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes the hot kernels faster.  Set
MXNUM_SKIP_EXT=1 to force a pure-Python install.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("MXNUM_SKIP_EXT") != "1" and os.path.exists("src/mxnum/_core.pyx"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mxnum._core",
                    ["src/mxnum/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        print("mxnum: Cython not available, installing without the compiled core")

setup(ext_modules=ext_modules)
