import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback in mvae.kernels takes over
    extensions = []
else:
    extensions = cythonize(
        [
            Extension(
                "mvae._kernels",
                ["src/mvae/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3", "embedsignature": True},
    )

setup(ext_modules=extensions)
