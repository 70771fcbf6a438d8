"""Category affinity: text embeddings of category names and their cosine table."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, ValidationError


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> Sequence[Sequence[float]]:
        """Return one vector per input text, in order."""


@dataclass(frozen=True)
class EmbeddingTable:
    names: tuple[str, ...]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.names) or vectors.shape[1] < 1:
            raise ValidationError(
                f"expected a ({len(self.names)}, d>=1) table, got shape {vectors.shape}"
            )
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embedding table contains non-finite values")
        norms = np.linalg.norm(vectors, axis=1)
        zero = [n for n, v in zip(self.names, norms) if v == 0.0]
        if zero:
            raise ValidationError(f"zero-norm embeddings for {zero}", zero)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class AffinityMatrix:
    names: tuple[str, ...]
    values: np.ndarray  # (n, n)

    @property
    def index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def row(self, name: str) -> np.ndarray:
        try:
            return self.values[self.index[name]]
        except KeyError:
            raise ValidationError(f"category {name!r} not in affinity matrix") from None

    def __getitem__(self, pair):
        a, b = pair
        idx = self.index
        return float(self.values[idx[a], idx[b]])


class FileEmbeddingProvider:
    """Precomputed embeddings from a JSON object ``{category: [floats]}``."""

    def __init__(self, path):
        self.path = Path(path)
        with self.path.open("r", encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict):
            raise ValidationError(f"{self.path}: embeddings file must be a JSON object")
        self.table = {str(k): [float(x) for x in v] for k, v in table.items()}

    def embed(self, texts):
        out = []
        for t in texts:
            if t not in self.table:
                raise KeyError(f"no embedding for {t!r} in {self.path}")
            out.append(self.table[t])
        return out

    def __contains__(self, name):
        return name in self.table


def embed_categories(categories, provider: EmbeddingProvider) -> EmbeddingTable:
    """Query ``provider`` once per category name; vectors are kept verbatim.

    ``categories`` is a :class:`~coordaug.dataset_io.CategorySet` or a plain
    sequence of names.
    """
    names = tuple(getattr(categories, "names", categories))
    vectors = []
    for name in names:
        try:
            (vec,) = provider.embed([name])
        except Exception as exc:
            raise BackendError(
                f"embedding provider failed for category {name!r}: {exc}",
                backend="embedder",
                detail=name,
            ) from exc
        vectors.append(np.asarray(vec, dtype=np.float64).ravel())
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise ValidationError(f"embedding dimensions differ across categories: {sorted(dims)}")
    if not vectors:
        return EmbeddingTable((), np.zeros((0, 1)))
    return EmbeddingTable(tuple(names), np.stack(vectors))


def build_affinity_matrix(table: EmbeddingTable) -> AffinityMatrix:
    """Pairwise cosine similarity of the category embeddings."""
    unit = table.vectors / np.linalg.norm(table.vectors, axis=1, keepdims=True)
    gram = unit @ unit.T
    # take the upper triangle once and mirror it so the result is exactly symmetric
    upper = np.triu(gram)
    values = upper + np.triu(gram, 1).T
    np.clip(values, -1.0, 1.0, out=values)
    return AffinityMatrix(table.names, values)


def off_diagonal_pairs(A: AffinityMatrix) -> np.ndarray:
    n = len(A)
    iu = np.triu_indices(n, k=1)
    return A.values[iu]


def affinity_threshold(A: AffinityMatrix, top_fraction: float) -> float:
    """Affinity value admitting the top ``top_fraction`` of category pairs.

    Over the ``m = n(n-1)/2`` upper-triangle pairs, returns the value of the
    ``ceil(top_fraction * m)``-th largest entry. Pairs tied with that value are
    all admitted by ``A_ij >= t``, so with ties the admitted count can exceed
    ``ceil(top_fraction * m)``.
    """
    n = len(A)
    if n < 2:
        raise ValidationError("affinity threshold needs at least two categories")
    if not 0.0 < top_fraction <= 1.0:
        raise ValidationError(f"top_fraction must be in (0, 1], got {top_fraction}")
    pairs = np.sort(off_diagonal_pairs(A))[::-1]
    m = pairs.size
    k = max(1, math.ceil(top_fraction * m - 1e-9))
    return float(pairs[min(k, m) - 1])
