"""Per-image choice of which object to edit and what category to turn it into."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .affinity import AffinityMatrix
from .dataset_io import DetectionSample, ObjectAnnotation
from .errors import ValidationError

log = logging.getLogger(__name__)

PROMPT_PREFIX = "A picture of"


@dataclass(frozen=True)
class ObjectScores:
    category_score: float
    area_score: float
    category_norm: float
    area_norm: float
    probability: float


@dataclass(frozen=True)
class AugmentationPlan:
    image_id: object
    annotation_id: object
    source_category: str
    target_category: str
    prompt: str
    seed: int

    @property
    def is_regeneration(self) -> bool:
        return self.source_category == self.target_category

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "annotation_id": self.annotation_id,
            "source_category": self.source_category,
            "target_category": self.target_category,
            "prompt": self.prompt,
            "is_regeneration": self.is_regeneration,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class StrategyConfig:
    alpha: float = 0.35
    theta: float = 1.0
    beta: float = 0.5
    use_affinity_matrix: bool = True
    prompt_brackets: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError(f"self-downweight beta must lie in (0, 1], got {self.beta}")


def render_prompt(category: str, brackets: bool = True) -> str:
    return f"{PROMPT_PREFIX} [{category}]" if brackets else f"{PROMPT_PREFIX} {category}"


def image_seed(global_seed: int, image_id) -> int:
    """Per-image 64-bit seed: global seed XOR a stable hash of the image id."""
    digest = hashlib.blake2b(repr(image_id).encode("utf-8"), digest_size=8).digest()
    return (int(global_seed) ^ int.from_bytes(digest, "little")) & 0xFFFF_FFFF_FFFF_FFFF


def category_score(obj: ObjectAnnotation | str, A: AffinityMatrix) -> float:
    """Row sum of the affinity matrix for the object's category (diagonal included)."""
    name = obj if isinstance(obj, str) else obj.category
    return float(np.sum(A.row(name)))


def area_score(object_area: float, image_area: float, alpha: float) -> float:
    if image_area <= 0:
        raise ValidationError(f"image area must be positive, got {image_area}")
    if object_area < 0 or object_area > image_area:
        raise ValidationError(
            f"object area {object_area} outside [0, image area {image_area}]"
        )
    return 1.0 - abs(object_area - image_area * alpha) / image_area


def _min_max(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def normalized_probabilities(category_norm, area_norm) -> np.ndarray:
    """Selection probabilities from already-normalized scores."""
    return softmax(np.abs(np.asarray(category_norm, float) + np.asarray(area_norm, float)))


def scores_from_raw(c1: Sequence[float], c2: Sequence[float]) -> list[ObjectScores]:
    """Normalize raw category/area scores and turn them into probabilities."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.size == 0:
        raise ValidationError("no objects to score")
    n1, n2 = _min_max(c1), _min_max(c2)
    p = normalized_probabilities(n1, n2)
    return [
        ObjectScores(float(a), float(b), float(x), float(y), float(q))
        for a, b, x, y, q in zip(c1, c2, n1, n2, p)
    ]


def selection_probabilities(
    objects: Sequence[ObjectAnnotation],
    A: AffinityMatrix | None,
    alpha: float,
    image_area: float,
) -> list[ObjectScores]:
    """Score each object and return its probability of being edited.

    With ``A=None`` (affinity ablation) the category score is constant and
    selection is driven by object size alone.
    """
    if not objects:
        raise ValidationError("selection needs at least one object; skip object-free images")
    c1 = [category_score(o, A) if A is not None else 0.0 for o in objects]
    c2 = [area_score(o.bbox_area, image_area, alpha) for o in objects]
    return scores_from_raw(c1, c2)


def sample_object(scores: Sequence[ObjectScores], rng: np.random.Generator) -> int:
    p = np.array([s.probability for s in scores])
    return int(rng.choice(len(p), p=p / p.sum()))


def target_distribution(
    source: str, A: AffinityMatrix, theta: float, beta: float
) -> dict[str, float]:
    """Probability of each admissible target category for ``source``.

    Returns ``{source: 1.0}`` when no other category clears ``theta``.
    """
    row = A.row(source)
    names = A.names
    src = A.index[source]
    admitted = [j for j in range(len(names)) if row[j] >= theta]
    others = [j for j in admitted if j != src and row[j] > 0]
    if not others:
        return {source: 1.0}
    weights = {j: float(row[j]) for j in others}
    if src in admitted:
        weights[src] = float(row[src]) * beta
    total = sum(weights.values())
    return {names[j]: w / total for j, w in sorted(weights.items())}


def choose_target_category(
    source: str, A: AffinityMatrix, theta: float, beta: float, rng: np.random.Generator
) -> str:
    dist = target_distribution(source, A, theta, beta)
    if len(dist) == 1:
        return next(iter(dist))
    names = list(dist)
    p = np.array([dist[n] for n in names])
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def eligible_objects(
    sample: DetectionSample, known: AffinityMatrix | Sequence[str] | None
) -> list[ObjectAnnotation]:
    """Objects that may be edited: non-crowd, and with an embedded category."""
    out = []
    for o in sample.objects:
        if o.iscrowd:
            continue
        if known is not None and o.category not in known:
            log.warning(
                "image %r: annotation %r has category %r without embedding; not selectable",
                sample.image_id, o.annotation_id, o.category,
            )
            continue
        out.append(o)
    return out


def plan_image(
    sample: DetectionSample,
    A: AffinityMatrix | None,
    config: StrategyConfig,
    rng: np.random.Generator,
    seed: int,
    all_categories: Sequence[str] | None = None,
) -> AugmentationPlan | None:
    """Choose the object and target category for one image.

    Returns ``None`` when the image has no eligible object. With
    ``config.use_affinity_matrix`` off the target is uniform over
    ``all_categories``.
    """
    use_matrix = config.use_affinity_matrix and A is not None
    candidates = eligible_objects(sample, A if use_matrix else None)
    if not candidates:
        return None
    scores = selection_probabilities(
        candidates, A if use_matrix else None, config.alpha, sample.image_area
    )
    obj = candidates[sample_object(scores, rng)]
    if use_matrix:
        target = choose_target_category(obj.category, A, config.theta, config.beta, rng)
    else:
        pool = list(all_categories if all_categories is not None else A.names)
        target = pool[int(rng.integers(len(pool)))]
    return AugmentationPlan(
        image_id=sample.image_id,
        annotation_id=obj.annotation_id,
        source_category=obj.category,
        target_category=target,
        prompt=render_prompt(target, config.prompt_brackets),
        seed=seed,
    )
