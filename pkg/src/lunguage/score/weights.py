from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from ..model import AttributeKind

K = AttributeKind

DEFAULT_ATTRIBUTE_WEIGHTS: dict[AttributeKind, float] = {
    K.DX_STATUS: 0.50,
    K.DX_CERTAINTY: 0.10,
    K.LOCATION: 0.20,
    K.SEVERITY: 0.15,
    K.ONSET: 0.15,
    K.IMPROVED: 0.15,
    K.WORSENED: 0.15,
    K.PLACEMENT: 0.15,
    K.NO_CHANGE: 0.10,
    K.MORPHOLOGY: 0.05,
    K.DISTRIBUTION: 0.05,
    K.MEASUREMENT: 0.05,
    K.COMPARISON: 0.03,
    K.PAST_HX: 0.01,
    K.OTHER_SOURCE: 0.01,
    K.ASSESSMENT_LIMITATIONS: 0.01,
}


def _kind(key) -> AttributeKind:
    if isinstance(key, AttributeKind):
        return key
    norm = str(key).strip()
    # accept CamelCase names (``NoChange``) as well as JSON keys (``no_change``)
    for k in AttributeKind:
        if norm in (k.value, k.name, k.name.replace("_", "").lower(), "".join(w.title() for w in k.value.split("_"))):
            return k
    snake = "".join("_" + c.lower() if c.isupper() else c for c in norm).lstrip("_")
    return AttributeKind(snake)


@dataclass(frozen=True)
class AttributeWeights:
    """Per-attribute weights for the structural score.

    Only ratios matter: the structural score normalizes by the weights of
    the attributes it actually compares.
    """

    weights: Mapping[AttributeKind, float]

    def __post_init__(self):
        missing = set(AttributeKind) - set(self.weights)
        if missing:
            raise ValueError(f"weights missing for {sorted(k.value for k in missing)}")
        for k, w in self.weights.items():
            if not (isinstance(w, (int, float)) and math.isfinite(w) and w >= 0):
                raise ValueError(f"weight for {k.value} must be a finite non-negative number, got {w!r}")
        if self.weights[K.DX_STATUS] <= 0:
            raise ValueError("dx_status weight must be positive")

    @classmethod
    def default(cls) -> "AttributeWeights":
        return cls(dict(DEFAULT_ATTRIBUTE_WEIGHTS))

    @classmethod
    def from_overrides(cls, overrides: Mapping | None = None) -> "AttributeWeights":
        """Defaults updated with ``overrides`` (keys: kind, JSON key or name)."""
        weights = dict(DEFAULT_ATTRIBUTE_WEIGHTS)
        for key, w in (overrides or {}).items():
            try:
                weights[_kind(key)] = w
            except ValueError:
                raise ValueError(f"unknown attribute kind {key!r}") from None
        return cls(weights)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "AttributeWeights":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"{path}: weights file must hold a JSON object")
        return cls.from_overrides(data)

    def __getitem__(self, kind: AttributeKind) -> float:
        return self.weights[kind]

    def scaled(self, factor: float) -> "AttributeWeights":
        return AttributeWeights({k: w * factor for k, w in self.weights.items()})

    def to_dict(self) -> dict[str, float]:
        return {k.value: self.weights[k] for k in AttributeKind}


@dataclass(frozen=True)
class TemporalWeights:
    study: float = 0.5
    group: float = 0.5

    def __post_init__(self):
        if self.study < 0 or self.group < 0:
            raise ValueError("temporal weights must be non-negative")
        if not math.isclose(self.study + self.group, 1.0, abs_tol=1e-9):
            raise ValueError(f"temporal weights must sum to 1, got {self.study} + {self.group}")
