class HierVSTError(Exception):
    pass


class ValidationError(HierVSTError, ValueError):
    """Input violates a shape, range or length contract."""


class ConfigError(HierVSTError, ValueError):
    pass


class AudioReadError(HierVSTError, OSError):
    pass


class BackendError(HierVSTError, RuntimeError):
    """A content-feature or evaluation backend failed or is unavailable."""


class NumericalError(HierVSTError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(HierVSTError, RuntimeError):
    pass
