"""Tabular missing-data imputation with model-based initialization and
attention-based refinement.

Submodules are imported lazily so that the command-line entry point can pin
BLAS thread counts before numpy is loaded.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = {
    "attention",
    "baselines",
    "cli",
    "dataset",
    "errors",
    "fiml",
    "metrics",
    "missingness",
    "notears",
    "rng",
    "sem",
    "training",
}


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module("." + name, __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(_SUBMODULES) + ["__version__"])
