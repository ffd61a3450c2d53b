"""Private graph datastore: deep-merge writes, ordered change feeds, scoped tokens."""

from .core import (
    ChangeEvent,
    GraphStore,
    InvalidDelta,
    InvalidPath,
    MissingPath,
    StoreError,
    deep_merge,
    join_path,
    split_path,
)
from .auth import AuthRegistry, AuthzDenied, AuthzError, ScopeEntry, scope_covers
from .service import DatastoreService
from .client import AccessDenied, DatastoreClient, RemoteStoreError, ResourceNotFound, build_assertion

__all__ = [
    "AccessDenied",
    "AuthRegistry",
    "AuthzDenied",
    "AuthzError",
    "ChangeEvent",
    "DatastoreClient",
    "DatastoreService",
    "GraphStore",
    "InvalidDelta",
    "InvalidPath",
    "MissingPath",
    "RemoteStoreError",
    "ResourceNotFound",
    "ScopeEntry",
    "StoreError",
    "build_assertion",
    "deep_merge",
    "join_path",
    "scope_covers",
    "split_path",
]
