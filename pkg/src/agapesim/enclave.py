"""Simulated secure-execution environment.

An enclave instance is code measured at load time plus a security
version number. It can emit signed reports binding 32 bytes of caller
data to that measurement. A quoting enclave co-resident on the same
platform turns a report into a quote: the report content signed with a
platform group key, so remote parties can check group membership
without learning which platform member signed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any

from . import crypto


class EnclaveError(Exception):
    pass


class LoadError(EnclaveError):
    pass


class QuoteError(EnclaveError):
    pass


@dataclass(frozen=True)
class Report:
    measurement: dict[str, Any]
    svn: int
    user_data: str
    nonce: str | None
    platform_id: str

    def public_view(self) -> dict[str, Any]:
        """Everything a remote verifier may see. The platform id stays local."""
        return {
            "measurement": dict(self.measurement),
            "svn": int(self.svn),
            "user_data": self.user_data,
            "nonce": self.nonce,
        }

    def report_hash(self) -> str:
        return crypto.hash_value(self.public_view()).hex


@dataclass
class EnclaveInstance:
    code: bytes
    svn: crypto.SecurityVersionNumber
    platform_id: str
    measurement: dict[str, Any]

    def create_report(self, user_data: str = "", nonce: str | None = None) -> Report:
        if len(user_data) > 64:
            raise EnclaveError("user_data is a digest slot, 64 hex chars max")
        return Report(
            measurement=dict(self.measurement),
            svn=int(self.svn),
            user_data=user_data,
            nonce=nonce,
            platform_id=self.platform_id,
        )


def load_enclave(
    code: bytes,
    svn: int = 1,
    platform_id: str = "platform-0",
    signer_public: bytes | None = None,
) -> EnclaveInstance:
    if not code:
        raise LoadError("refusing to load an empty code image")
    measurement = {
        "osc_hash": crypto.sha256(code).hex,
        "signer": crypto.sha256(signer_public).hex if signer_public else None,
    }
    return EnclaveInstance(
        code=code,
        svn=crypto.SecurityVersionNumber(svn),
        platform_id=platform_id,
        measurement=measurement,
    )


def local_attest(report: Report, verifier: EnclaveInstance) -> bool:
    """Same-platform check used before a quoting enclave will sign anything."""
    return report.platform_id == verifier.platform_id


@dataclass
class QuotingEnclave:
    """Holds one platform group membership and signs report views with it."""

    platform_id: str
    group: crypto.SigningGroup
    member_id: str

    def __post_init__(self) -> None:
        if self.member_id not in self.group.members:
            raise QuoteError(f"{self.member_id!r} is not in group {self.group.group_id!r}")

    def quote(self, report: Report) -> dict[str, Any]:
        if report.platform_id != self.platform_id:
            raise QuoteError("report comes from a different platform")
        view = report.public_view()
        gsig = crypto.group_sign(self.group, self.member_id, crypto.canonical_serialize(view))
        return {
            "report": view,
            "group_id": gsig.group_id,
            "signature": crypto.b64(gsig.signature),
            "issued_at": int(time.time() * 1000),
        }


def quote_hash(quote: dict[str, Any]) -> str:
    return crypto.hash_value(quote).hex
