"""Builds the optional compiled kernel core (gradleak._core).

The package works without it -- gradleak._kernels falls back to the
pure-NumPy implementations in gradleak._pure when the extension is
missing or when GRADLEAK_PURE=1 is set.
"""

import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "gradleak._core",
        ["src/gradleak/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
)
