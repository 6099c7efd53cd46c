"""Exception hierarchy shared by the arena, broker and client layers."""


class ZerocastError(Exception):
    """Base class for every error raised by zerocast."""


# arena / allocator


class ArenaError(ZerocastError):
    pass


class NameCollision(ArenaError):
    pass


class RangeOccupied(ArenaError):
    """The requested fixed virtual range is already mapped in this process."""


class BaseMismatch(ArenaError):
    pass


class ArenaMissing(ArenaError):
    pass


class OutOfArenaMemory(ArenaError):
    pass


class UnknownAddress(ArenaError):
    pass


class DoubleFree(UnknownAddress):
    pass


# broker protocol


class ProtocolError(ZerocastError):
    pass


class BrokerError(ZerocastError):
    """An error reply from the broker; ``code`` is the wire error code."""

    code = 0

    def __init__(self, message="", code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class QueueFull(BrokerError):
    code = 1


class AddressOutOfArena(BrokerError):
    code = 2


class LimitExceeded(BrokerError):
    code = 3


class UnknownEntry(BrokerError):
    code = 4


class NotHolder(BrokerError):
    code = 5


class PayloadTooLarge(BrokerError):
    code = 6


class ConflictingArena(BrokerError):
    code = 7


class BrokerUnreachable(ZerocastError):
    pass


class SessionClosed(ZerocastError):
    pass


# client


class ConsumedMessageError(ZerocastError):
    """The exclusive message handle was consumed by publish()."""


ERROR_CODES = {
    cls.code: cls
    for cls in (QueueFull, AddressOutOfArena, LimitExceeded, UnknownEntry, NotHolder, PayloadTooLarge, ConflictingArena)
}
# sent just before the broker closes a session that violated the protocol
PROTOCOL_VIOLATION = 9


def error_from_code(code, message):
    cls = ERROR_CODES.get(code, BrokerError)
    return cls(message, code)
