"""Build script for the optional compiled trial kernel.

The extension is marked optional: if no C toolchain is available the
package installs anyway and the pure-numpy kernel is used at runtime.
-ffp-contract=off keeps the compiled arithmetic bit-identical to numpy
(no fused multiply-add), which the kernel parity tests rely on.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "poca.theory._mc_kernel",
        ["src/poca/theory/_mc_kernel.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize
    else []
)
