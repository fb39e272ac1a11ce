import platform
import sys

import numpy
from setuptools import Extension, setup
from setuptools.errors import CCompilerError, ExecError, PlatformError

# The hot kernels (vectorized sin/cos for sine-activated networks, the 3x3
# stencil for the wave solver) live in a small Cython extension. -ffast-math
# is required for gcc to emit libmvec SIMD calls for sin/cos; the extension
# is numerically cross-checked against the pure-NumPy fallback in the tests.
if platform.system() == "Linux" and platform.machine() == "x86_64":
    FAST_FLAGS = ["-O3", "-ffast-math", "-fopenmp-simd", "-mavx2", "-mfma"]
    LINK_LIBS = ["mvec", "m"]
else:
    FAST_FLAGS = ["-O3"]
    LINK_LIBS = ["m"]

extensions = [
    Extension(
        "hiddenwave._kernels._fastkern",
        ["src/hiddenwave/_kernels/_fastkern.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=FAST_FLAGS,
        libraries=LINK_LIBS,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]


def run_setup(with_extension):
    if with_extension:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    else:
        ext_modules = []
    setup(ext_modules=ext_modules)


try:
    run_setup(True)
except (CCompilerError, ExecError, PlatformError, SystemExit) as exc:
    sys.stderr.write(
        f"warning: building the compiled kernels failed ({exc!r}); "
        "installing with the pure-NumPy fallback\n"
    )
    run_setup(False)
