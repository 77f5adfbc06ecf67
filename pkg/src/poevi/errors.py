"""Exception hierarchy shared across the package."""

from __future__ import annotations

import numpy as np


class PoEError(Exception):
    """Base class for all errors raised by poevi."""


class DimensionError(PoEError, ValueError):
    """Inputs disagree on the ambient dimension D (or on K)."""


class SingularityError(PoEError, np.linalg.LinAlgError):
    """A matrix that must be positive definite could not be factored."""

    def __init__(self, message, w=None):
        super().__init__(message)
        self.w = None if w is None else np.asarray(w, dtype=float)


class EmptyModelError(PoEError):
    """Every expert weight was pruned, leaving nothing to sample."""


class NormalizabilityError(PoEError):
    """The weights do not define an integrable product of experts."""


class NonConvergenceError(PoEError):
    """An iterative method hit its iteration cap before reaching tolerance.

    ``best`` holds the best iterate found and ``residual`` its error measure.
    """

    def __init__(self, message, best=None, residual=float("nan"), iteration=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iteration = iteration


class ConstraintRepairError(PoEError):
    """Pruned weights could not be repaired back into the feasible set."""


class NonFiniteError(PoEError, FloatingPointError):
    """A score, density or integrand evaluated to NaN or infinity."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TransportError(PoEError):
    """The external target subprocess died, timed out or could not be started."""

    def __init__(self, message, payload=""):
        if payload:
            message = f"{message} (payload excerpt: {payload[:200]!r})"
        super().__init__(message)
        self.payload = payload


class ProtocolError(TransportError):
    """The external target replied with a malformed or misaligned message."""
