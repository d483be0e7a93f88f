"""Build script: compiles the optional native kernel extension.

If Cython or a C toolchain is unavailable the package installs without the
extension and the pure-numpy kernels are used at runtime.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ctdrl._kernels._native",
                ["src/ctdrl/_kernels/_native.pyx"],
            )
        ],
        language_level=3,
    )
except Exception:
    ext_modules = []

setup(ext_modules=ext_modules)
