class SpecFaceError(Exception):
    """Base class for all errors raised by this package."""


class MeshParseError(SpecFaceError, ValueError):
    pass


class TopologyError(SpecFaceError, ValueError):
    pass


class DisconnectedMeshError(TopologyError):
    pass


class ZeroExtentError(SpecFaceError, ValueError):
    pass


class ShapeMismatchError(SpecFaceError, ValueError):
    pass


class EigenSolverError(SpecFaceError, RuntimeError):
    pass


class DivergenceError(SpecFaceError, RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(SpecFaceError, ValueError):
    pass


class ConfigMismatchError(SpecFaceError, ValueError):
    pass
