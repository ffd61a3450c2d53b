"""Fishing ground compliance certification.

Checks that every position fix of a trip lies inside a named permitted
area, that the fixes were signed by the reporting device, and that the
device key is endorsed by a manufacturer on the industry's audited
list. The artifact says whether the trip stayed inside the area without
revealing a single coordinate.

Coordinates travel as decimal strings and are evaluated as floats. A
point exactly on the area boundary counts as inside.
"""

from __future__ import annotations

import base64
from typing import Any

from agapesim import crypto

INDUSTRY_DOC = "/bookmarks/industry/fishing"

R_UNKNOWN_AREA = "UNKNOWN_AREA"
R_UNAUDITED = "UNAUDITED_MANUFACTURER"
R_BAD_ENDORSEMENT = "BAD_DEVICE_ENDORSEMENT"
R_BAD_POINT_SIG = "BAD_POINT_SIGNATURE"
R_MALFORMED = "MALFORMED_TRIP"


def _xy(point: dict[str, Any]) -> tuple[float, float]:
    return float(point["lon"]), float(point["lat"])


def point_in_ring(x: float, y: float, ring: list[tuple[float, float]]) -> bool:
    n = len(ring)
    crossings = 0
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        # boundary test: collinear and inside the segment's bounding box
        if (bx - ax) * (y - ay) - (by - ay) * (x - ax) == 0:
            if min(ax, bx) <= x <= max(ax, bx) and min(ay, by) <= y <= max(ay, by):
                return True
        if (ay > y) != (by > y):
            x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
            if x < x_cross:
                crossings += 1
    return crossings % 2 == 1


def _point_message(point: dict[str, Any]) -> bytes:
    return crypto.canonical_serialize(
        {"lat": str(point["lat"]), "lon": str(point["lon"]), "ts": point["ts"]}
    )


def _decode64(text: str) -> bytes | None:
    try:
        pad = -len(text) % 4
        return base64.urlsafe_b64decode(text + "=" * pad)
    except Exception:
        return None


def run(ctx: Any, filter: dict[str, Any]) -> dict[str, Any]:
    trip_path = str(filter["trip"])
    area_name = str(filter["area"])

    trip = ctx.fetch(trip_path)
    industry = ctx.fetch(INDUSTRY_DOC)

    area = (industry.get("areas") or {}).get(area_name)
    if not isinstance(area, dict) or not isinstance(area.get("ring"), list) or len(area["ring"]) < 3:
        return _fail(R_UNKNOWN_AREA, area=area_name)

    device = trip.get("device")
    points = trip.get("points")
    if not isinstance(device, dict) or not isinstance(points, list):
        return _fail(R_MALFORMED, area=area_name)

    manufacturer = device.get("manufacturer")
    registry = (industry.get("audited_manufacturers") or {}).get(manufacturer)
    if not isinstance(registry, dict):
        return _fail(R_UNAUDITED, area=area_name, manufacturer=manufacturer)

    maker_key = _decode64(str(registry.get("public_key", "")))
    device_key = _decode64(str(device.get("public_key", "")))
    endorsement = _decode64(str(device.get("endorsement", "")))
    if not (maker_key and device_key and endorsement) or not crypto.verify(
        maker_key, device_key, endorsement
    ):
        return _fail(R_BAD_ENDORSEMENT, area=area_name, manufacturer=manufacturer)

    ring = [(float(v[0]), float(v[1])) for v in area["ring"]]
    inside_count = 0
    for point in points:
        sig = _decode64(str(point.get("sig", "")))
        if sig is None or not crypto.verify(device_key, _point_message(point), sig):
            return _fail(R_BAD_POINT_SIG, area=area_name)
        x, y = _xy(point)
        if point_in_ring(x, y, ring):
            inside_count += 1

    result = {
        "certified": inside_count == len(points),
        "area": area_name,
        "points_checked": len(points),
        "points_inside": inside_count,
    }
    if not points:
        # nothing to check is vacuous compliance; flag it so a reader can tell
        result["empty"] = True
    return result


def _fail(reason: str, **detail: Any) -> dict[str, Any]:
    return {"certified": False, "reason": reason, **detail}


def sign_point(secret: bytes, point: dict[str, Any]) -> str:
    """Device-side helper used when seeding test data."""
    sig = crypto.sign(secret, _point_message(point))
    return base64.urlsafe_b64encode(sig).decode("ascii").rstrip("=")
