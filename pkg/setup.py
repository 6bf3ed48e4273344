"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so the build must never fail because Cython or a
C compiler is missing.  Set AGGBFGS_SKIP_EXT=1 to skip the extension build
entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("AGGBFGS_SKIP_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "aggbfgs._kernels._core",
            ["src/aggbfgs/_kernels/_core.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            optional=True,
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
