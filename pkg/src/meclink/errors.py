"""Exception hierarchy for meclink."""


class MecLinkError(Exception):
    """Base class for all errors raised by this package."""


class EncodingError(MecLinkError, ValueError):
    def __init__(self, value, reason="cannot encode value"):
        super().__init__(f"{reason}: {value!r}")
        self.value = value


class SchemaError(MecLinkError, ValueError):
    pass


class EmptySpaceError(MecLinkError, ValueError):
    pass


class GenerationError(MecLinkError, ValueError):
    pass


class EstimationError(MecLinkError, RuntimeError):
    pass


class DataError(MecLinkError, ValueError):
    """Malformed input data such as an unreadable CSV file."""
