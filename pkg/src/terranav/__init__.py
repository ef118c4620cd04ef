"""Self-supervised off-road navigation from ground and aerial imagery.

Submodules are imported on first attribute access so that the command line
entry point can configure BLAS thread counts before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("nn", "config", "sim", "labeling", "model", "collect", "planner", "evaluation",
               "cli")

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
