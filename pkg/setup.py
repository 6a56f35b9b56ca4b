"""Builds the optional compiled IVF kernels.

Without Cython (or a C compiler) the package installs pure-Python and
``lookalike._kernels`` falls back to numpy.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("LOOKALIKE_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools.extension import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "lookalike._ivf_core",
                    ["src/lookalike/_ivf_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
