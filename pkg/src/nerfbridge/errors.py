"""Exception hierarchy shared by every nerfbridge module."""


class NerfBridgeError(Exception):
    """Base class for all nerfbridge errors."""


class DimensionMismatch(NerfBridgeError, ValueError):
    pass


class DegenerateVector(NerfBridgeError, ValueError):
    pass


class EmptyInput(NerfBridgeError, ValueError):
    pass


class OutOfRange(NerfBridgeError, IndexError):
    pass


class ParseError(NerfBridgeError):
    pass


class ValidationError(NerfBridgeError):
    """Invalid dataset content. ``record_id`` and ``field`` locate the problem."""

    def __init__(self, message, record_id=None, field=None):
        self.record_id = record_id
        self.field = field
        where = []
        if record_id is not None:
            where.append(f"record {record_id!r}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class VersionError(NerfBridgeError):
    pass


class InsufficientViews(NerfBridgeError):
    def __init__(self, message, record_id=None):
        self.record_id = record_id
        super().__init__(message)


class DuplicateId(NerfBridgeError, ValueError):
    pass


class ConfigMismatch(NerfBridgeError):
    pass


class EmptyDataset(NerfBridgeError):
    pass


class MissingCaption(NerfBridgeError):
    def __init__(self, message, record_id=None):
        self.record_id = record_id
        super().__init__(message)


class MissingAnchor(NerfBridgeError):
    pass


class CorruptCheckpoint(NerfBridgeError):
    pass
