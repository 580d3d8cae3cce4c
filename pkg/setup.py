"""Build the optional Cython kernel core.

The package works without it: ``tbngranger.kernels`` falls back to NumPy
implementations when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("TBNGRANGER_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        extensions = [
            Extension(
                "tbngranger.kernels._ckernels",
                ["src/tbngranger/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: kernels must stay bitwise comparable with the fallback
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
