"""Verdict/report containers shared by all condition and theorem checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np


class Verdict(str, Enum):
    HOLDS = "holds"
    FAILS = "fails"
    INCONCLUSIVE = "inconclusive"


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()] if value.ndim else float(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    return value


@dataclass
class ConditionReport:
    """Outcome of one checked condition.

    margin is signed: positive means satisfied with slack, and it is the exact
    extremal value over the tested samples.  A failing verdict always carries a
    witness describing the minimizing configuration.
    """

    condition_id: str
    verdict: Verdict
    margin: float
    witness: Optional[dict] = None
    samples_used: int = 0
    seed: int = 0
    vacuous: bool = False
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict == Verdict.FAILS and self.witness is None:
            raise ValueError("failing verdict requires a witness")

    @property
    def holds(self) -> bool:
        return self.verdict == Verdict.HOLDS

    def to_dict(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "verdict": self.verdict.value,
            "margin": float(self.margin),
            "witness": _jsonable(self.witness),
            "samples_used": int(self.samples_used),
            "seed": int(self.seed),
            "vacuous": bool(self.vacuous),
            "extras": _jsonable(self.extras),
        }
