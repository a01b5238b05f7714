"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LayercutError(Exception):
    exit_code = 1


class ConfigError(LayercutError):
    exit_code = 2


class AssetError(LayercutError):
    """Missing or unreadable input file."""

    exit_code = 3


class GuidanceError(LayercutError):
    exit_code = 4


class GuidanceTimeout(GuidanceError):
    pass


class GuidanceHTTPError(GuidanceError):
    def __init__(self, status, message=""):
        super().__init__(f"guidance service returned HTTP {status}: {message}")
        self.status = status


class MalformedResponse(GuidanceError):
    pass


class NumericError(LayercutError):
    """A NaN or inf showed up in a loss or parameter."""

    exit_code = 5
