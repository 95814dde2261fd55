class EnvSimError(Exception):
    """Base class for simulator errors."""


class ConfigError(EnvSimError, ValueError):
    """Invalid scenario or generator configuration."""


class UnknownFunction(EnvSimError, KeyError):
    pass
