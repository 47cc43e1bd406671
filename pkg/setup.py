import platform

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

compile_args = ["-O3"]
if platform.machine() in ("x86_64", "AMD64"):
    compile_args.append("-mpopcnt")

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "mlhash.kernels._hamming",
                ["src/mlhash/kernels/_hamming.pyx"],
                extra_compile_args=compile_args,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
