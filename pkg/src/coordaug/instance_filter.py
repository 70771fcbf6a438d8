"""Instance-level quality filter: keep an edit only if a classifier agrees.

The edited object is cropped by its bbox and classified; the edit is accepted
when the target category is among the ``k`` best predictions after mapping
classifier labels onto dataset categories.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import BackendError, ValidationError


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    top_labels: tuple[str, ...]
    reason: str = ""

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "top_labels": list(self.top_labels), "reason": self.reason}


@dataclass(frozen=True)
class LabelMap:
    """Classifier label to dataset category. ``mapping=None`` means identity."""

    mapping: Mapping[str, str] | None = None
    categories: frozenset = field(default=frozenset())

    def __post_init__(self):
        if self.mapping is not None and self.categories:
            unknown = sorted(set(self.mapping.values()) - set(self.categories))
            if unknown:
                raise ValidationError(f"label map targets unknown categories: {unknown}")

    def __call__(self, label: str) -> str | None:
        if self.mapping is None:
            return label
        return self.mapping.get(label)

    @classmethod
    def from_file(cls, path, categories: Sequence[str] = ()) -> "LabelMap":
        with Path(path).open("r", encoding="utf-8") as fh:
            mapping = json.load(fh)
        if not isinstance(mapping, dict):
            raise ValidationError(f"{path}: label map must be a JSON object")
        return cls({str(k): str(v) for k, v in mapping.items()}, frozenset(categories))


def validate_predictions(predictions: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    preds = [(str(l), float(s)) for l, s in predictions]
    labels = [l for l, _ in preds]
    if len(set(labels)) != len(labels):
        raise BackendError("classifier returned duplicate labels", backend="classifier")
    scores = [s for _, s in preds]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise BackendError("classifier scores are not in descending order", backend="classifier")
    return preds


def crop_object(image: np.ndarray, bbox) -> np.ndarray:
    """Pixels covered by ``bbox`` (fractional edges rounded outward)."""
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValidationError(f"empty bbox {bbox}")
    H, W = image.shape[:2]
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = int(math.ceil(x + w)), int(math.ceil(y + h))
    if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
        raise ValidationError(f"bbox {bbox} outside image {W}x{H}")
    return image[y0:y1, x0:x1].copy()


def decide(predictions, target_category: str, label_map: LabelMap | None, k: int) -> FilterDecision:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    label_map = label_map or LabelMap()
    top = tuple(label for label, _ in predictions[:k])
    mapped = {label_map(l) for l in top}
    if target_category in mapped:
        return FilterDecision(True, top)
    return FilterDecision(
        False, top, f"target {target_category!r} not in top-{k} predictions {list(top)}"
    )


def filter_instance(
    patch: np.ndarray,
    target_category: str,
    classifier,
    label_map: LabelMap | None = None,
    k: int = 3,
) -> FilterDecision:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    try:
        raw = classifier.classify(patch)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"classifier failed: {exc}", backend="classifier") from exc
    return decide(validate_predictions(raw), target_category, label_map, k)
