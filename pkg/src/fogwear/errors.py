"""Exception hierarchy shared by every tier."""

from __future__ import annotations


class FogError(Exception):
    """Base class for all fogwear errors."""


class ConfigError(FogError):
    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class DomainError(FogError, ValueError):
    pass


class DivisionError(DomainError, ZeroDivisionError):
    pass


class InsufficientDataError(FogError, ValueError):
    pass


# signal chain
class OpenCircuitError(FogError, ValueError):
    pass


class OutOfRangeError(FogError, ValueError):
    pass


class InvalidSessionError(FogError, ValueError):
    pass


# trace files and wire formats
class ParseError(FogError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SchemaError(FogError, ValueError):
    pass


class FrameTooLarge(FogError, ValueError):
    pass


class TruncatedError(FogError, ValueError):
    pass


# mesh
class NodeError(FogError, KeyError):
    pass


class RouteError(FogError, ValueError):
    pass


# gateway
class GapError(FogError):
    def __init__(self, device_id: str, expected: int, got: int):
        self.device_id = device_id
        self.expected = expected
        self.got = got
        super().__init__(f"{device_id}: expected seq {expected}, got {got}")


class EmptySessionError(FogError):
    pass


class NotFoundError(FogError, KeyError):
    pass


class SessionStateError(FogError):
    pass


class DuplicateError(FogError, KeyError):
    pass


# cloud
class StartupError(FogError, OSError):
    pass


class PersistError(FogError, OSError):
    pass
