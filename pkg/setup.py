import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("GNPLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "gnplab._kernels",
                    ["src/gnplab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
