"""Pre-approved contract code, keyed by name.

Each contract is one source file exposing run(ctx, filter). The file's
bytes are what gets measured at enclave load, so the registry can state
the expected code hash for every name and a verifier can tell whether a
given artifact really came from the code it claims.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable

from . import catch_area, kmeans_cluster, mass_balance, monte_carlo, sustainability


@dataclass(frozen=True)
class ContractSpec:
    name: str
    source_path: str
    run: Callable[[Any, dict[str, Any]], dict[str, Any]]
    default_paths: tuple[str, ...]


_MODULES = {
    "sustainability": sustainability,
    "catch_area": catch_area,
    "kmeans": kmeans_cluster,
    "mass_balance": mass_balance,
    "monte_carlo": monte_carlo,
}

_DEFAULT_PATHS = {
    "sustainability": ("/bookmarks/sites/{site}",),
    "catch_area": ("/bookmarks/trips/{trip}", "/bookmarks/industry/fishing"),
    "kmeans": ("/bookmarks/datasets/{dataset}",),
    "mass_balance": ("/bookmarks/trades/{lot}",),
    "monte_carlo": ("/bookmarks/simulations/{job}",),
}

REGISTRY: dict[str, ContractSpec] = {
    name: ContractSpec(
        name=name,
        source_path=module.__file__,
        run=module.run,
        default_paths=_DEFAULT_PATHS[name],
    )
    for name, module in _MODULES.items()
}


def get(name: str) -> ContractSpec:
    if name not in REGISTRY:
        raise KeyError(f"no contract named {name!r}")
    return REGISTRY[name]


def source_bytes(name: str) -> bytes:
    with open(get(name).source_path, "rb") as fh:
        return fh.read()


def code_hash(name: str) -> str:
    return hashlib.sha256(source_bytes(name)).hexdigest()


def trusted_hashes() -> dict[str, str]:
    """Name to expected code hash for everything in the registry."""
    return {name: code_hash(name) for name in REGISTRY}
