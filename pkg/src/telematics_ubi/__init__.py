"""Claim-frequency modelling from raw telematics streams.

Submodules: ``ingest`` (parsing and cleaning), ``features`` (speed transition
matrices, PCA, policy aggregates), ``regress`` (Poisson and NB2 GLMs),
``evaluate`` (cross-validation, scores, voting), ``learning`` (harsh-event
power laws), ``simulate`` (synthetic portfolios) and ``cli``.

Submodules load on first attribute access so that ``telematics_ubi.cli`` can
set thread limits before numpy is imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("errors", "ingest", "features", "regress", "evaluate", "learning", "simulate", "pipeline", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = list(_SUBMODULES) + ["__version__"]
