# Builds the optional compiled core. The package falls back to pure numpy
# kernels when the extension is missing, so a failed build is not fatal.
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "hairsynth._core",
                ["src/hairsynth/_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
