"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a vectorized numpy
backend is selected at import time); the compiled kernels only make the hot
loops faster. Build failures are therefore tolerated.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None:
    ext = Extension(
        "fruitvox.kernels._gridops",
        sources=["src/fruitvox/kernels/_gridops.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
    extensions = cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=extensions)
