"""Exception hierarchy shared by all modules.

Every error carries its class name verbatim into CLI diagnostics and run
manifests, so names here are part of the external interface.
"""


class LabError(Exception):
    """Base class for all errors raised by this package."""


# cantor measure
class CantorError(LabError):
    pass


class DepthExceeded(CantorError):
    pass


class PrecisionLoss(CantorError):
    pass


class GapViolation(CantorError):
    """A generation whose intervals would overlap (alpha_{k-1} <= 2 alpha_k)."""


class InvalidInterval(CantorError):
    pass


class EpsTooLarge(CantorError):
    pass


# poset
class PosetError(LabError):
    pass


class SizeExceeded(PosetError):
    pass


class DimensionMismatch(PosetError):
    pass


class NotAnAntichain(PosetError):
    pass


class LYMViolation(PosetError):
    pass


# hamiltonian
class HamiltonianError(LabError):
    pass


class MeshTooCoarse(HamiltonianError):
    pass


class EmptyBox(HamiltonianError):
    pass


class EigsolverNoConvergence(HamiltonianError):
    pass


class DegenerateEigenvalue(HamiltonianError):
    pass


class BranchAmbiguity(HamiltonianError):
    pass


class WindowEmpty(HamiltonianError):
    pass


# multiscale / wegner
class WegnerError(LabError):
    pass


class ValueInGap(WegnerError):
    pass


class ShapeMismatch(WegnerError):
    pass


class HypothesisFailed(WegnerError):
    pass


class InsufficientTrials(WegnerError):
    pass


class ConstraintViolation(WegnerError):
    pass


# cli
class UsageError(LabError):
    pass


class ConfigError(LabError):
    pass
