import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "aaconv._kernels",
        ["src/aaconv/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # reassociation is fixed at compile time, so results stay
        # bit-deterministic run to run; accuracy is covered by the
        # oracle-comparison tests
        extra_compile_args=[
            "-O3",
            "-fopenmp",
            "-fassociative-math",
            "-fno-signed-zeros",
            "-fno-trapping-math",
        ],
        extra_link_args=["-fopenmp"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
