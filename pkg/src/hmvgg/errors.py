"""Exception types shared across the package."""


class HMVGGError(Exception):
    """Base class for every error raised by hmvgg."""


class ShapeError(HMVGGError, ValueError):
    pass


class BroadcastError(ShapeError):
    pass


class AutogradError(HMVGGError, RuntimeError):
    pass


class ParseError(HMVGGError, ValueError):
    pass


class ManifestError(HMVGGError, ValueError):
    pass


class ConfigError(HMVGGError, ValueError):
    pass


class CheckpointError(HMVGGError, ValueError):
    pass
