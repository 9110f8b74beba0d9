"""Build script for the compiled box-kernel extension.

The extension is optional: when Cython or a C compiler is unavailable the
package installs pure-Python and ``mitodet.kernels`` falls back to the
numpy reference implementation at import time.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mitodet.kernels._box_kernels",
                ["src/mitodet/kernels/_box_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
