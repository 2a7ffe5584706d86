from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("inferix._fastspan", ["src/inferix/_fastspan.pyx"])],
        language_level=3,
    )
except ImportError:
    # The profiler falls back to a pure-Python recorder without the extension.
    ext_modules = []

setup(ext_modules=ext_modules)
