"""Annual energy use certification.

Prefers a site's audited annual report when one exists; otherwise adds
up monthly utility bills. The artifact then states energy use without
exposing the underlying documents.
"""

from __future__ import annotations

from typing import Any


def run(ctx: Any, filter: dict[str, Any]) -> dict[str, Any]:
    site = str(filter["site"]).rstrip("/")

    report = ctx.fetch_optional(site + "/report")
    if isinstance(report, dict) and isinstance(report.get("annual_kwh"), int):
        return {
            "certified": True,
            "source": "report",
            "annual_kwh": report["annual_kwh"],
            "year": report.get("year"),
        }

    bills = ctx.fetch_optional(site + "/bills")
    if isinstance(bills, dict):
        monthly = [
            doc["kwh"]
            for _, doc in sorted(bills.items())
            if isinstance(doc, dict) and isinstance(doc.get("kwh"), int)
        ]
        if monthly:
            return {
                "certified": True,
                "source": "bills",
                "annual_kwh": sum(monthly),
                "months": len(monthly),
            }

    return {"certified": False, "source": None, "reason": "NO_DATA"}
