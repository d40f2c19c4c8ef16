"""Build script: compiles the optional rasterizer extension.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile only costs speed, never correctness.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython kernel if possible, otherwise install pure-Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing, etc.
            warnings.warn(f"skipping compiled rasterizer kernel: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"skipping {ext.name}: {exc}")


def make_extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        [
            Extension(
                "headforge.kernels._raster",
                ["src/headforge/kernels/_raster.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=make_extensions(), cmdclass={"build_ext": OptionalBuildExt})
