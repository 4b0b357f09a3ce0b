"""Exception hierarchy shared across the package."""


class MaskClusterError(Exception):
    """Base class for all package errors."""


class DegenerateVector(MaskClusterError, ValueError):
    pass


class ShapeMismatch(MaskClusterError, ValueError):
    pass


class NonFinite(MaskClusterError, FloatingPointError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class InsufficientPoints(MaskClusterError, ValueError):
    pass


class EmptyMaskAtFeatureScale(MaskClusterError):
    def __init__(self, index: int):
        super().__init__(f"mask {index} has no support at feature resolution")
        self.index = index


class NoSupervisedPixels(MaskClusterError):
    pass


class PlacementFailure(MaskClusterError):
    pass


class CorruptManifest(MaskClusterError, OSError):
    pass


class BadMagic(MaskClusterError, OSError):
    pass


class ConfigError(MaskClusterError, ValueError):
    pass
