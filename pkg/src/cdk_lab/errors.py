"""Exception hierarchy for cdk_lab."""


class CdkLabError(Exception):
    """Base class for every error raised by the package."""


class StructuralError(CdkLabError):
    """Inputs have incompatible shapes or live on different spaces."""


class SpecError(CdkLabError):
    """A generator or file specification is malformed."""


class GridError(CdkLabError):
    """A time is not a multiple of 1/T."""


class SizeError(CdkLabError):
    """An exhaustive routine was asked to work above its cap."""


class EmptyRestrictionError(CdkLabError):
    """A restriction or reweighting kept zero mass."""


class LiftError(CdkLabError):
    """Some coupled pair admits no T-step geodesic."""

    def __init__(self, pair, message=None):
        self.pair = pair
        super().__init__(message or f"no geodesic for pair {pair}")


class NormalizationError(CdkLabError):
    """A spliced geodesic violates the constant-speed invariant."""


class PreconditionError(CdkLabError):
    """An operation's precondition does not hold."""


class MixError(CdkLabError):
    """A left/right concatenation at the crossing point is not a geodesic."""

    def __init__(self, anchor, left, right):
        self.anchor = anchor
        self.left = left
        self.right = right
        super().__init__(
            f"concatenation at point {anchor} is not a geodesic: "
            f"left={left} right={right}"
        )
