from setuptools import Extension, setup
from Cython.Build import cythonize
import numpy as np

extensions = [
    Extension(
        "deskvla.kernels._engine",
        sources=["src/deskvla/kernels/_engine.pyx", "src/deskvla/kernels/nf4kernels.c"],
        include_dirs=[np.get_include(), "src/deskvla/kernels"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-march=native", "-fopenmp-simd", "-funroll-loops"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
)
