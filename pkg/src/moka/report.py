"""JSON-serialisable run/experiment report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


@dataclass
class RunReport:
    config: dict
    metrics: list[dict] = field(default_factory=list)  # step, split, loss, accuracy, lr
    curves: dict[str, list[float]] = field(default_factory=dict)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    counts: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, Any] = field(default_factory=dict)
    attention: list[dict] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    network: Any = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return _plain({
            "config": self.config,
            "summary": self.summary,
            "counts": self.counts,
            "timing": self.timing,
            "tables": self.tables,
            "metrics": self.metrics,
            "curves": self.curves,
            "attention": self.attention,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path
