"""Independent reference implementations used to cross-check the package.

Everything here is written from scratch on purpose and imports nothing
from agapesim, so a bug in the package cannot hide by being shared with
the checker. These stay frozen: fix the package, not the oracle.
"""

from __future__ import annotations

import hashlib
from typing import Any

_CTRL_SHORT = {
    "\b": "\\b",
    "\f": "\\f",
    "\n": "\\n",
    "\r": "\\r",
    "\t": "\\t",
}


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ord(ch) < 0x20:
            out.append(_CTRL_SHORT.get(ch, "\\u%04x" % ord(ch)))
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def canonical_oracle(value: Any) -> bytes:
    """Hand-rolled canonical JSON writer: sorted keys, no whitespace, UTF-8."""

    def emit(v: Any) -> str:
        if v is None:
            return "null"
        if v is True:
            return "true"
        if v is False:
            return "false"
        if isinstance(v, int):
            return str(v)
        if isinstance(v, str):
            return _quote(v)
        if isinstance(v, list):
            return "[" + ",".join(emit(item) for item in v) + "]"
        if isinstance(v, dict):
            parts = []
            for key in sorted(v):
                assert isinstance(key, str)
                parts.append(_quote(key) + ":" + emit(v[key]))
            return "{" + ",".join(parts) + "}"
        raise AssertionError(f"oracle got unsupported type {type(v)!r}")

    return emit(value).encode("utf-8")


def sha256_hex_oracle(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def deep_merge_oracle(base: Any, delta: Any) -> Any:
    """Merge semantics done the slow explicit way.

    Dicts merge recursively; every other value, arrays included, replaces
    the old one wholesale. A null leaf is stored, not treated as a delete.
    """
    if isinstance(base, dict) and isinstance(delta, dict):
        merged = dict(base)
        for key, val in delta.items():
            if key in merged:
                merged[key] = deep_merge_oracle(merged[key], val)
            else:
                merged[key] = _copy(val)
        return merged
    return _copy(delta)


def _copy(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _copy(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_copy(x) for x in v]
    return v


def fold_events_oracle(events: list[dict[str, Any]], root: Any = None) -> Any:
    """Replay a change feed by folding deltas in seq order at their paths."""
    state: Any = root if root is not None else {}
    for ev in sorted(events, key=lambda e: e["seq"]):
        state = _apply_at(state, [p for p in ev["path"].split("/") if p], ev["delta"])
    return state


def _apply_at(state: Any, segments: list[str], delta: Any) -> Any:
    if not segments:
        return deep_merge_oracle(state, delta)
    if not isinstance(state, dict):
        state = {}
    head, rest = segments[0], segments[1:]
    new = dict(state)
    new[head] = _apply_at(state.get(head, {}), rest, delta)
    return new


def point_in_polygon_oracle(point: tuple[float, float], ring: list[tuple[float, float]]) -> bool:
    """Brute-force even-odd ray cast, boundary counts as inside."""
    x, y = point
    n = len(ring)
    for i in range(n):
        if _on_segment(point, ring[i], ring[(i + 1) % n]):
            return True
    inside = False
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            # x coordinate where the edge crosses the horizontal through y
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < x_cross:
                inside = not inside
    return inside


def _on_segment(p: tuple[float, float], a: tuple[float, float], b: tuple[float, float]) -> bool:
    (px, py), (ax, ay), (bx, by) = p, a, b
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if cross != 0:
        return False
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def nearest_centroid_oracle(point: list[float], centroids: list[list[float]]) -> int:
    """Exhaustive nearest-centroid scan. Ties go to the lowest index."""
    best_i = 0
    best_d = sum((a - b) ** 2 for a, b in zip(point, centroids[0]))
    for i in range(1, len(centroids)):
        d = sum((a - b) ** 2 for a, b in zip(point, centroids[i]))
        if d < best_d:
            best_i, best_d = i, d
    return best_i
