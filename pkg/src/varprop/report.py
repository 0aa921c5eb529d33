"""The machine-readable report every CLI command emits.

Layout (all keys always present)::

    {
      "command": "propagate",
      "config": {...},                      # echo of the effective settings
      "metrics": {"name": number, ...},     # finite numbers only
      "series": {"name": [[x, y], ...]},
      "timings": {"name": {"median_s": s, "repeats": n}},
      "quality": {"variance_clamps": n, "max_clamp": v, "clamp_warning": bool},
      "result": {...}                       # command-specific payload
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

REPORT_KEYS = ("command", "config", "metrics", "series", "timings", "quality", "result")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ExperimentReport:
    command: str
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    quality: dict = field(default_factory=lambda: {"variance_clamps": 0, "max_clamp": 0.0,
                                                   "clamp_warning": False})
    result: dict = field(default_factory=dict)

    def add_quality(self, state) -> None:
        q = self.quality
        q["variance_clamps"] += int(state.clamps)
        q["max_clamp"] = max(q["max_clamp"], float(state.max_clamp))
        q["clamp_warning"] = q["clamp_warning"] or bool(state.clamp_warning)

    def add_timing(self, name: str, median_s: float, repeats: int) -> None:
        self.timings[name] = {"median_s": float(median_s), "repeats": int(repeats)}

    def to_dict(self) -> dict:
        for k, v in self.metrics.items():
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"metric {k!r} is not a finite number: {v!r}")
        return _plain({k: getattr(self, k) for k in REPORT_KEYS})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"
