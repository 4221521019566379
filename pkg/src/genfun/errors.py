"""Exception hierarchy shared by all genfun modules."""


class GenFunError(Exception):
    """Base class for all genfun errors."""


class OutOfGamma(GenFunError):
    """A fiber point (x, y, z) lies outside the admissible domain."""


class DegenerateGz(GenFunError):
    """g_z >= 0 was observed; the sign normalization is violated."""


class NoConvergence(GenFunError):
    """An iterative solve failed after damping and multistarts."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularJacobian(GenFunError):
    """The solve Jacobian is numerically singular (nondegeneracy failure)."""


class OutOfRange(GenFunError):
    """A scalar value lies outside the attainable interval of a monotone map."""


class NotInU(GenFunError):
    """A jet stencil point does not solve, so it is (numerically) outside the jet set."""


class DegenerateGradient(GenFunError):
    """A height-function gradient vanished; no tangent space available."""


class NotGConvex(GenFunError):
    """An operation required a g-convex input function and the check failed."""


class NotAKink(GenFunError):
    """The queried node has fewer than two supports."""


class NotLocallyGConvex(GenFunError):
    """Local support extraction failed at some node."""


class HypothesisUnverifiable(GenFunError):
    """Too many hypothesis-sampling solves failed to certify a theorem premise."""


class AllClipped(GenFunError):
    """No admissible source node remained for some target node of a transform."""


class ConfigError(GenFunError):
    """A scenario config failed to parse or validate."""
