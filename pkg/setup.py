import os

from setuptools import setup

ext_modules = []
if os.environ.get("CEILVO_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "ceilvo._kernels._ckernels",
                    ["src/ceilvo/_kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # no Cython or numpy at build time: the numpy kernels are used
        ext_modules = []

setup(ext_modules=ext_modules)
