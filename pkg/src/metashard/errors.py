"""Exception hierarchy shared by all subpackages."""


class MetashardError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MetashardError, ValueError):
    pass


class ZeroNormError(MetashardError, ValueError):
    pass


class InvalidEntryError(MetashardError, ValueError):
    pass


class EmptyIndexError(MetashardError, LookupError):
    pass


class EmptyInputError(MetashardError, ValueError):
    pass


class DuplicateIdError(MetashardError, KeyError):
    pass


class IndexFormatError(MetashardError, ValueError):
    """A persisted index file is corrupt, truncated or of an unknown version."""


class SampleTooLargeError(MetashardError, ValueError):
    pass


class TooFewPointsError(MetashardError, ValueError):
    pass


class BalanceInfeasibleError(MetashardError, ValueError):
    """A single vertex outweighs the per-partition weight cap."""


class FormatError(MetashardError, ValueError):
    """Malformed vector file; ``offset`` is the byte offset of the bad record."""

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PartialTimeoutError(MetashardError, TimeoutError):
    """Gather timed out. ``partials`` holds whatever arrived in time."""

    def __init__(self, query_id: int, partials: list, missing: set) -> None:
        super().__init__(
            f"query {query_id}: timed out waiting for shards {sorted(missing)}"
        )
        self.query_id = query_id
        self.partials = partials
        self.missing = missing


class ShardUnavailableError(MetashardError, RuntimeError):
    pass


class LeaseHeldError(MetashardError, RuntimeError):
    pass


class ConnectivityError(MetashardError, ConnectionError):
    pass


class NotFoundError(MetashardError, LookupError):
    pass


class ProtocolError(MetashardError, ValueError):
    """A wire frame could not be decoded."""
