import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CAMA_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "cama.kernels._core",
                    ["src/cama/kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "language_level": 3,
            },
        )

setup(ext_modules=ext_modules)
