import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off: the compiled sweep must produce bit-identical doubles to
# the pure-Python kernel, so FMA contraction has to stay off.
extensions = []
if cythonize is not None and not os.environ.get("HETBIAS_PURE_PYTHON"):
    extensions = cythonize(
        [
            Extension(
                "hetbias.mcmc._kernel",
                ["src/hetbias/mcmc/_kernel.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=extensions)
