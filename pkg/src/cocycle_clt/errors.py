"""Exception types shared across the package."""


class CocycleError(Exception):
    """Base class for every error raised by this package."""


class EmptyGraph(CocycleError):
    """The graph has no vertices."""


class AsymmetricEdgeSet(CocycleError):
    """A directed edge is present without its reverse."""


class ValidationError(CocycleError):
    """An input violates a structural invariant; the message names it."""


class NoConvergence(CocycleError):
    """An iteration hit its cap before reaching the requested residual."""


class UnknownVertex(CocycleError):
    """A vertex name does not belong to the graph."""


class NumericalBreakdown(CocycleError):
    """A matrix factorization failed or collapsed below representable scale."""


class NotInGeneralPosition(CocycleError):
    """Two flags are too close to a degenerate pairing."""


class ExplosionGuard(CocycleError):
    """Loop enumeration exceeded the configured node cap."""


class TailTooHeavy(CocycleError):
    """The truncated return-time law leaves too much unassigned mass."""


class InsufficientData(CocycleError):
    """Not enough distinct observations to run a fit."""


class InsufficientSamples(CocycleError):
    """A Monte Carlo estimate was requested with too few stored samples."""


class TooManyRejections(CocycleError):
    """Too many integration samples were rejected as degenerate pairings."""


class DegenerateCovariance(CocycleError):
    """The covariance has no mass on the sum-zero subspace."""


class CenteringBiasError(CocycleError):
    """The drift estimate is too noisy to center a CLT run of this length."""


class ParseError(CocycleError):
    """A configuration file could not be parsed."""


class MissingArtifact(CocycleError):
    """An aggregation step requires an output file that was never produced."""
