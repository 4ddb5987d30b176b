"""JSON helpers shared by reports and configs."""

from __future__ import annotations

import dataclasses
import math


def jsonable(x):
    """Recursively convert dataclasses/tuples to plain JSON types; +-inf become strings."""
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        x = dataclasses.asdict(x)
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, dict):
        return {k: jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    return x
