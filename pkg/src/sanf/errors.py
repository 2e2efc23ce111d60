"""Error types shared across the package.

The split matters for the CLI exit-code mapping and for the service error
envelope: contract violations are the caller's fault (bad inputs, mismatched
shapes), usage errors are API misuse (backward before forward, eval before
train), divergence is a runtime abort of an otherwise valid run.
"""


class ContractViolation(ValueError):
    """An input broke a documented precondition."""


class UsageError(RuntimeError):
    """An API was driven in an unsupported order or configuration."""


class DivergenceError(RuntimeError):
    """Training produced NaN/Inf and was aborted."""


class VocabularyError(ContractViolation):
    """A text prompt is not in the closed prompt vocabulary."""


class EmptySelectionError(RuntimeError):
    """Mesh export requested while no triangle passes the vote threshold."""


class EmptySurfaceError(RuntimeError):
    """Marching cubes produced no geometry at the requested threshold."""
