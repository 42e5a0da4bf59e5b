import os

from setuptools import setup

ext_modules = []
if os.environ.get("DFLOW_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "deformflow._kernels._core",
                    ["src/deformflow/_kernels/_core.pyx", "src/deformflow/_kernels/_fastloops.c"],
                    extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                    extra_link_args=["-lmvec", "-lm"],
                )
            ],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )
    except Exception as e:
        # no Cython / no compiler: the package falls back to the numpy kernels
        print(f"warning: compiled kernels disabled ({e}); using the numpy fallback")
        ext_modules = []

setup(ext_modules=ext_modules)
