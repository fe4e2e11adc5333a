"""mckv: particle methods for entrance, periodic, and lifted invariant measures
of time-inhomogeneous mean-field SDEs, plus exact threshold certification for
the double-well (Curie-Weiss) family."""

from . import cli, entrance, errors, integrate, lift, measure, model, verify

__version__ = "0.1.0"

__all__ = ["measure", "model", "integrate", "entrance", "lift", "verify", "cli", "errors", "__version__"]
