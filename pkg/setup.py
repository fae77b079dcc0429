import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mfh2hinf._mckernel",
                ["src/mfh2hinf/_mckernel.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-Python install; mfh2hinf.kernels falls back to the numpy backend.
    ext_modules = []

setup(ext_modules=ext_modules)
