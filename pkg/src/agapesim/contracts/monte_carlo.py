"""Seeded Monte Carlo pi estimate, used as a compute-heavy benchmark load.

Deterministic for a given seed and sample count. The estimate travels
as a decimal string so the artifact stays canonical-encodable.
"""

from __future__ import annotations

import random
from typing import Any

DEFAULT_SAMPLES = 10**6
DEFAULT_SEED = 42


def run(ctx: Any, filter: dict[str, Any]) -> dict[str, Any]:
    params: dict[str, Any] = {}
    if "job" in filter:
        params = ctx.fetch_optional(str(filter["job"])) or {}
    samples = filter.get("samples") or params.get("samples") or DEFAULT_SAMPLES
    seed = filter.get("seed", params.get("seed", DEFAULT_SEED))

    rng = random.Random(seed)
    inside = 0
    for _ in range(samples):
        x = rng.random()
        y = rng.random()
        if x * x + y * y <= 1.0:
            inside += 1
    estimate = 4.0 * inside / samples

    return {
        "certified": True,
        "samples": samples,
        "seed": seed,
        "inside": inside,
        "estimate": repr(estimate),
    }
