"""Desk-scale oblivious-certification stack.

Subsystems: canonical crypto primitives, a private graph datastore with
change feeds, a simulated enclave loader with remote attestation, an
oblivious contract runtime that emits certification artifacts, a
hash-chained ordering ledger, a broker, and an offline validator.
"""

__version__ = "0.1.0"
