"""Merge engine and change feed for the graph datastore.

The store holds one JSON tree. Writers PUT a partial document at a path
and the store deep-merges it: object keys that do not exist are created,
keys that do are merged recursively, and any non-object value (arrays
included) replaces the previous value wholesale. A null leaf is stored
as null, it does not delete anything. Applying the same merge twice
leaves the same state, which is what lets clients retry blindly.

Each top-level write target becomes a registered resource. Accepted
merges get a per-resource revision and a store-wide sequence number, and
are offered to subscribers in sequence order, so replaying a feed from
the start reconstructs the tree exactly. Rejected merges consume no
sequence number.
"""

from __future__ import annotations

import copy
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable

from ..crypto import CanonicalizationError, canonical_serialize


class StoreError(Exception):
    pass


class InvalidPath(StoreError):
    pass


class InvalidDelta(StoreError):
    pass


class MissingPath(StoreError):
    pass


def split_path(path: str) -> list[str]:
    segments = [s for s in path.split("/") if s != ""]
    for seg in segments:
        if seg in (".", ".."):
            raise InvalidPath(f"path segment {seg!r} not allowed")
    return segments


def join_path(segments: list[str]) -> str:
    return "/" + "/".join(segments)


def is_path_prefix(prefix: list[str], path: list[str]) -> bool:
    return len(prefix) <= len(path) and path[: len(prefix)] == prefix


def deep_merge(base: Any, delta: Any) -> Any:
    if isinstance(base, dict) and isinstance(delta, dict):
        out = dict(base)
        for key, val in delta.items():
            out[key] = deep_merge(out[key], val) if key in out else copy.deepcopy(val)
        return out
    return copy.deepcopy(delta)


@dataclass(frozen=True)
class ChangeEvent:
    path: str
    delta: Any
    rev: int
    seq: int
    resource_id: str

    def to_json(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "delta": self.delta,
            "rev": self.rev,
            "seq": self.seq,
            "resource_id": self.resource_id,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "ChangeEvent":
        return cls(
            path=doc["path"],
            delta=doc["delta"],
            rev=doc["rev"],
            seq=doc["seq"],
            resource_id=doc["resource_id"],
        )


@dataclass
class Resource:
    resource_id: str
    root: str
    rev: int = 0


class GraphStore:
    """In-process store core. Thread-safe; all waiting happens in callers."""

    def __init__(self, log_path: str | os.PathLike[str] | None = None):
        self._tree: dict[str, Any] = {}
        self._resources: dict[str, Resource] = {}
        self._seq = 0
        self._lock = threading.RLock()
        self._subs: dict[int, tuple[list[str], Callable[[ChangeEvent], None]]] = {}
        self._next_sub = 1
        self._log_path = os.fspath(log_path) if log_path is not None else None
        self._log_file = None
        if self._log_path is not None:
            if os.path.exists(self._log_path):
                self._replay_log()
            os.makedirs(os.path.dirname(self._log_path) or ".", exist_ok=True)
            self._log_file = open(self._log_path, "a", encoding="utf-8")

    def _replay_log(self) -> None:
        with open(self._log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = ChangeEvent.from_json(json.loads(line))
                segs = split_path(event.path)
                res = self._resources.get(event.resource_id)
                if res is None:
                    res = Resource(resource_id=event.resource_id, root=event.path)
                    self._resources[event.resource_id] = res
                res.rev = max(res.rev, event.rev)
                self._seq = max(self._seq, event.seq)
                self._apply(segs, event.delta)

    def _apply(self, segments: list[str], delta: Any) -> None:
        if not segments:
            self._tree = deep_merge(self._tree, delta)
            return
        node = self._tree
        for seg in segments[:-1]:
            child = node.get(seg)
            if not isinstance(child, dict):
                child = {}
                node[seg] = child
            node = child
        leaf = segments[-1]
        if leaf in node:
            node[leaf] = deep_merge(node[leaf], delta)
        else:
            node[leaf] = copy.deepcopy(delta)

    def _subtree(self, segments: list[str]) -> Any:
        node: Any = self._tree
        for seg in segments:
            if not isinstance(node, dict) or seg not in node:
                raise MissingPath(join_path(segments))
            node = node[seg]
        return node

    def _owner(self, segments: list[str]) -> Resource | None:
        best: Resource | None = None
        for res in self._resources.values():
            root_segs = split_path(res.root)
            if is_path_prefix(root_segs, segments):
                if best is None or len(root_segs) > len(split_path(best.root)):
                    best = res
        return best

    def merge(self, path: str, delta: Any) -> dict[str, Any]:
        segments = split_path(path)
        if not segments:
            raise InvalidPath("merge target must name a resource path")
        try:
            canonical_serialize(delta)
        except CanonicalizationError as exc:
            raise InvalidDelta(str(exc)) from exc
        with self._lock:
            try:
                before = canonical_serialize(self._subtree(segments))
            except MissingPath:
                before = None
            owner = self._owner(segments)
            if owner is None:
                owner = Resource(resource_id="r-" + uuid.uuid4().hex[:12], root=join_path(segments))
                self._resources[owner.resource_id] = owner
            self._apply(segments, delta)
            after = canonical_serialize(self._subtree(segments))
            owner.rev += 1
            self._seq += 1
            event = ChangeEvent(
                path=join_path(segments),
                delta=copy.deepcopy(delta),
                rev=owner.rev,
                seq=self._seq,
                resource_id=owner.resource_id,
            )
            if self._log_file is not None:
                record = event.to_json()
                record["ts"] = int(time.time() * 1000)
                self._log_file.write(json.dumps(record, ensure_ascii=False) + "\n")
                self._log_file.flush()
            # deliver under the lock so every subscriber sees seq order
            for watch_segs, callback in list(self._subs.values()):
                if is_path_prefix(watch_segs, segments) or is_path_prefix(segments, watch_segs):
                    callback(event)
            return {
                "resource_id": owner.resource_id,
                "rev": owner.rev,
                "seq": event.seq,
                "changed": before != after,
            }

    def get(self, path: str) -> Any:
        segments = split_path(path)
        with self._lock:
            return copy.deepcopy(self._subtree(segments))

    def get_with_meta(self, path: str) -> tuple[Any, Resource | None]:
        segments = split_path(path)
        with self._lock:
            value = copy.deepcopy(self._subtree(segments))
            owner = self._owner(segments)
            meta = Resource(owner.resource_id, owner.root, owner.rev) if owner else None
            return value, meta

    def resource_rev(self, path: str) -> int | None:
        with self._lock:
            owner = self._owner(split_path(path))
            return owner.rev if owner else None

    def subscribe(
        self, path: str, callback: Callable[[ChangeEvent], None]
    ) -> Callable[[], None]:
        segments = split_path(path)
        with self._lock:
            sub_id = self._next_sub
            self._next_sub += 1
            self._subs[sub_id] = (segments, callback)

        def unsubscribe() -> None:
            with self._lock:
                self._subs.pop(sub_id, None)

        return unsubscribe

    def close(self) -> None:
        with self._lock:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None
