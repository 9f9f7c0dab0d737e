import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Fused multiply-add contraction would change rounding relative to the
# numpy fallback, so it stays off even when targeting the host ISA.
compile_args = ["-O3", "-ffp-contract=off"]
if os.environ.get("PREDCODE_NATIVE", "0") == "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "predcode._kernels",
        ["src/predcode/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
        },
    )
)
