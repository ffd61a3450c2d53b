"""Clustering certification over a private point set.

Runs Lloyd's algorithm to a fixed point (or an iteration cap) and
certifies the cluster shape without exposing the points themselves.
Everything is deterministic: centroids start at the first k points,
distance ties resolve to the lowest centroid index, and centroid
updates are plain sequential means, so identical input always yields
an identical artifact.

Point coordinates travel as decimal strings; results carry centroids
and inertia the same way.
"""

from __future__ import annotations

from typing import Any

import numpy as np

MAX_ITERATIONS = 50


def run(ctx: Any, filter: dict[str, Any]) -> dict[str, Any]:
    doc = ctx.fetch(str(filter["dataset"]))
    raw = doc.get("points")
    if not isinstance(raw, list):
        return {"certified": False, "reason": "MALFORMED_DATASET"}
    points = [[float(c) for c in p] for p in raw]
    n = len(points)
    k = filter.get("k") or doc.get("k") or max(1, n // 250)
    if not isinstance(k, int) or k < 1 or k > n:
        return {"certified": False, "reason": "K_EXCEEDS_N", "n": n, "k": k}

    assignments, centroids, iterations = _lloyd(points, k)
    inertia = 0.0
    for i, point in enumerate(points):
        inertia += _sqdist(point, centroids[assignments[i]])

    return {
        "certified": True,
        "n": n,
        "k": k,
        "iterations": iterations,
        "assignments": assignments,
        "centroids": [[repr(c) for c in centroid] for centroid in centroids],
        "inertia": repr(inertia),
    }


def _sqdist(a: list[float], b: list[float]) -> float:
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) * (x - y)
    return total


def _assign(arr: np.ndarray, centroids: list[list[float]]) -> list[int]:
    n, dims = arr.shape
    dist = np.zeros((n, len(centroids)), dtype=np.float64)
    for ci, centroid in enumerate(centroids):
        acc = np.zeros(n, dtype=np.float64)
        # accumulate one dimension at a time, in order, matching a
        # left-to-right scalar sum exactly
        for d in range(dims):
            diff = arr[:, d] - centroid[d]
            acc += diff * diff
        dist[:, ci] = acc
    return [int(i) for i in np.argmin(dist, axis=1)]


def _lloyd(points: list[list[float]], k: int) -> tuple[list[int], list[list[float]], int]:
    arr = np.array(points, dtype=np.float64)
    centroids = [list(p) for p in points[:k]]
    assignments = _assign(arr, centroids)
    iterations = 0
    while iterations < MAX_ITERATIONS:
        iterations += 1
        new_centroids = []
        for ci in range(k):
            members = [points[i] for i, a in enumerate(assignments) if a == ci]
            if not members:
                new_centroids.append(list(centroids[ci]))
                continue
            dims = len(members[0])
            mean = []
            for d in range(dims):
                total = 0.0
                for m in members:
                    total += m[d]
                mean.append(total / len(members))
            new_centroids.append(mean)
        new_assignments = _assign(arr, new_centroids)
        centroids = new_centroids
        if new_assignments == assignments:
            assignments = new_assignments
            break
        assignments = new_assignments
    return assignments, centroids, iterations
