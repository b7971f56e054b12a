"""Build script for the optional compiled kernels.

The package is pure Python by default; ``coopadapt._fastops`` is a Cython
extension providing faster im2col and rotated-IoU kernels.  The extension is
marked optional: if no compiler (or Cython) is available the install still
succeeds and the numpy fallback is used at import time.
"""

from setuptools import setup
from setuptools.extension import Extension

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "coopadapt._fastops",
        sources=["src/coopadapt/_fastops.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
