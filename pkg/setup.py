"""Optional compiled build of the simulator hot paths.

The modules are plain Python; when Cython and a C compiler are available
they are also compiled (types for the GPU model come from device.pxd).
Set GPUSCHED_PURE_PYTHON=1 to skip compilation.
"""

import os

from setuptools import setup

HOT_MODULES = ["src/gpusched/device.py", "src/gpusched/engine.py", "src/gpusched/scheduler.py",
               "src/gpusched/metrics.py"]


def extensions():
    if os.environ.get("GPUSCHED_PURE_PYTHON"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        HOT_MODULES,
        compiler_directives={"language_level": 3, "annotation_typing": False},
        quiet=True,
    )


setup(ext_modules=extensions())
