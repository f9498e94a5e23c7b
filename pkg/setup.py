from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; raster.py falls back
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "angiosynth._raster",
                ["src/angiosynth/_raster.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
