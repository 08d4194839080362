"""Live-image cloning with demand-paged memory streaming, host-level
deduplication, live migration and a deterministic cluster simulator."""

from .errors import (CorruptImage, InvalidConfig, InvalidPage, MigrationAborted, MissingPage,
                     OvercommitFailure, PlacementError, ProtocolError, StoreError,
                     StreamUnavailable, UnknownHost, UnknownVm, VmsError)
from .pages import PAGE_SIZE, ZERO, IdentityRecord, LiveImageManifest, PageStore, hash_page

__version__ = "0.1.0"

__all__ = [
    "VmsError", "CorruptImage", "InvalidConfig", "InvalidPage", "MigrationAborted", "MissingPage",
    "OvercommitFailure", "PlacementError", "ProtocolError", "StoreError", "StreamUnavailable",
    "UnknownHost", "UnknownVm", "PAGE_SIZE", "ZERO", "IdentityRecord", "LiveImageManifest",
    "PageStore", "hash_page",
]
