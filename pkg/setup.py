import os

import numpy
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("RESCAP_SKIP_NATIVE"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "rescap._gotoh",
                ["src/rescap/_gotoh.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
