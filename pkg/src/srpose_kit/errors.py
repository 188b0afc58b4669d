"""Exception hierarchy shared by every subsystem."""


class SRPoseError(Exception):
    """Base class for all toolkit errors."""


# geometry
class ZeroTranslation(SRPoseError, ValueError):
    pass


class DegenerateTranslation(SRPoseError, ValueError):
    pass


class DegenerateSixD(SRPoseError, ValueError):
    pass


class BehindCamera(SRPoseError, ValueError):
    def __init__(self, indices, message=None):
        self.indices = [int(i) for i in indices]
        super().__init__(message or f"points behind camera: {self.indices[:20]}")


# tensor
class ShapeMismatch(SRPoseError, ValueError):
    pass


class EmptyInput(SRPoseError, ValueError):
    pass


class NonScalarLoss(SRPoseError, ValueError):
    pass


class TapeConsumed(SRPoseError, RuntimeError):
    pass


# keypoints
class EmptyView(SRPoseError, ValueError):
    pass


class NoKeypointsInPrompt(SRPoseError, ValueError):
    pass


class TooManyKeypoints(SRPoseError, ValueError):
    pass


class ParseError(SRPoseError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DimensionMismatch(ParseError):
    pass


# model
class ZeroDescriptor(SRPoseError, ValueError):
    pass


class AllRowsMasked(SRPoseError, ValueError):
    pass


class ConfigMismatch(SRPoseError, ValueError):
    pass


# training / data
class ConfigError(SRPoseError, ValueError):
    pass


class DivergenceDetected(SRPoseError, RuntimeError):
    def __init__(self, message, last_good=None, step=None):
        self.last_good = last_good
        self.step = step
        super().__init__(message)


# baseline
class InsufficientMatches(SRPoseError, ValueError):
    pass


class DegenerateConfiguration(SRPoseError, ValueError):
    pass


class CheiralityAmbiguous(SRPoseError, ValueError):
    pass


class NoConsensus(SRPoseError, RuntimeError):
    pass


class DegenerateGeometry(SRPoseError, ValueError):
    pass


# metrics
class EmptyModel(SRPoseError, ValueError):
    pass


class EmptyErrors(SRPoseError, ValueError):
    pass
