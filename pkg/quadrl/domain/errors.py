from enum import IntEnum


class ConfigError(ValueError):
    """Invalid topology / run configuration."""


class ArenaParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class ArenaInvariantError(ValueError):
    def __init__(self, rule: str, msg: str):
        super().__init__(f"{rule}: {msg}")
        self.rule = rule


class SimError(RuntimeError):
    """Unknown agent, dead agent, or a pose in collision."""


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class NotReady(RuntimeError):
    """Replay buffer holds fewer items than requested."""


class ExperimentError(RuntimeError):
    pass


class ErrorCode(IntEnum):
    SHORT_FRAME = 1
    BAD_LENGTH = 2
    SCHEMA_MISMATCH = 3
    UNKNOWN_KIND = 4
    HANDLER_ERROR = 5
    NOT_READY = 6
    INVALID_ARGUMENT = 7


class ProtocolError(ValueError):
    def __init__(self, code: ErrorCode, msg: str):
        super().__init__(f"{code.name}: {msg}")
        self.code = code


class RpcError(RuntimeError):
    pass


class RpcTimeout(RpcError):
    pass


class RpcConnectionError(RpcError):
    pass


class RemoteError(RpcError):
    """Server-side failure propagated through an ErrorResponse frame."""

    def __init__(self, code: int, msg: str):
        try:
            name = ErrorCode(code).name
        except ValueError:
            name = str(code)
        super().__init__(f"remote {name}: {msg}")
        self.code = code
        self.remote_message = msg
