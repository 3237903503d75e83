import ctypes.util
import os
import platform

import numpy as np
from setuptools import Extension, setup


def _kernel_extension():
    compile_args = ["-O3"]
    libraries = []
    macros = []
    # glibc's vector math library lets the tanh loops run as SIMD calls
    if platform.system() == "Linux" and platform.machine() == "x86_64" and ctypes.util.find_library("mvec"):
        macros.append(("S2SL_LIBMVEC", "1"))
        libraries.append("mvec")
    if os.environ.get("S2SL_NATIVE", "") == "1":
        compile_args.append("-march=native")
    return Extension(
        "seq2slate._kernels_c",
        ["src/seq2slate/_kernels_c.pyx"],
        include_dirs=[np.get_include(), "src/seq2slate"],
        define_macros=macros,
        libraries=libraries,
        extra_compile_args=compile_args,
    )


ext_modules = []
if os.environ.get("S2SL_NO_EXTENSION", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize([_kernel_extension()], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
