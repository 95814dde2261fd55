"""Simulator for restoring serverless functions from memory templates in shared remote pools."""
from .errors import ConfigError, EnvSimError, UnknownFunction

__version__ = "0.1.0"

__all__ = ["ConfigError", "EnvSimError", "UnknownFunction", "__version__"]
