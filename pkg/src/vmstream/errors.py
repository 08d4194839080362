"""Exception hierarchy.

Every domain error carries a short ``code`` (the class name) so the CLI can
print ``error: <code>: <message>`` without a lookup table.
"""


class VmsError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidPage(VmsError):
    pass


class MissingPage(VmsError):
    pass


class CorruptImage(VmsError):
    pass


class StoreError(VmsError):
    pass


class InvalidConfig(VmsError):
    pass


class StreamUnavailable(VmsError):
    pass


class ProtocolError(VmsError):
    pass


class UnknownHost(VmsError):
    pass


class UnknownVm(VmsError):
    pass


class OvercommitFailure(VmsError):
    pass


class PlacementError(VmsError):
    pass


class MigrationAborted(VmsError):
    pass
