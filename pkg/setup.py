import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "gpscopf._swing",
                ["src/gpscopf/_swing.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    # Pure-Python fallback in gpscopf._swing_py is selected at import time.
    extensions = []

setup(ext_modules=extensions)
