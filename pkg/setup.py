"""Build script for the compiled conv kernels.

The extension is optional: if Cython or a C compiler is unavailable the
install still succeeds and the package falls back to the NumPy backend
at import time.
"""

import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: compiled backend skipped ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  "the NumPy backend will be used", file=sys.stderr)


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"warning: {exc}; compiled backend skipped", file=sys.stderr)
        return []
    # -fno-wrapv undoes the -fwrapv CPython ships in its CFLAGS; wrapping
    # semantics on signed ints block gcc's loop vectorizer and the kernels
    # never get near overflow
    cflags = ["-O3", "-fno-wrapv"]
    if os.environ.get("FSCE_NO_NATIVE") != "1":
        cflags.append("-march=native")
    ext = Extension(
        "fsce.backend._kernels",
        ["src/fsce/backend/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=cflags,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
