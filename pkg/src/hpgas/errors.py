class HpgasError(Exception):
    pass


class NotInitializedError(HpgasError):
    pass


class AlreadyInitializedError(HpgasError):
    pass


class CollectiveMismatchError(HpgasError):
    """Members of a collective disagreed on its arguments."""


class NotAMemberError(HpgasError):
    pass


class UnknownSegmentError(HpgasError, KeyError):
    pass


class OutOfRangeError(HpgasError, IndexError):
    pass


class AlignmentError(HpgasError, ValueError):
    pass


class PoolExhaustedError(HpgasError, MemoryError):
    pass


class ForeignPointerError(HpgasError):
    pass


class DoubleFreeError(HpgasError):
    pass


class TransportError(HpgasError, OSError):
    pass


class RendezvousTimeout(TransportError, TimeoutError):
    pass
