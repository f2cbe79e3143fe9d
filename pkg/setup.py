import os

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# The compiled rasterizer kernel is optional: if the build fails the package
# falls back to the pure-numpy implementation selected at import time.
extra_compile_args = ["-O3", "-fno-math-errno"]
extra_link_args = []
if os.environ.get("CAGESPLAT_MARCH_NATIVE", "1") == "1":
    extra_compile_args.append("-march=native")
if os.environ.get("CAGESPLAT_OPENMP", "1") == "1":
    extra_compile_args.append("-fopenmp")
    extra_link_args.append("-fopenmp")

extensions = [
    Extension(
        "cagesplat.render._raster_cy",
        sources=["src/cagesplat/render/_raster_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=extra_compile_args,
        extra_link_args=extra_link_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
