"""Exhaustive nearest-neighbour search over a photo gallery and recall@k."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .tensor import ShapeError


def _distances(queries: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = queries[:, None, :] - gallery[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))
    if metric == "cosine":
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class GalleryIndex:
    embeddings: np.ndarray
    photo_ids: list
    metric: str = "euclidean"
    _rank_of_id: np.ndarray = field(init=False, repr=False)
    _pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("gallery needs at least one embedding row")
        self.photo_ids = list(self.photo_ids)
        if len(self.photo_ids) != len(self.embeddings):
            raise ValueError("one photo id per gallery row is required")
        if len(set(self.photo_ids)) != len(self.photo_ids):
            raise ValueError("photo ids must be unique")
        # tie-break key: position of each row's id in sorted id order
        order = sorted(range(len(self.photo_ids)), key=lambda i: self.photo_ids[i])
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        self._rank_of_id = rank
        self._pos = {pid: i for i, pid in enumerate(self.photo_ids)}

    @property
    def n(self) -> int:
        return len(self.photo_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def distances(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise ShapeError(f"query dim {queries.shape[1]} != gallery dim {self.dim}")
        return _distances(queries, self.embeddings, self.metric)


def build_index(embeddings: np.ndarray, photo_ids: Sequence[Hashable] | None = None, metric: str = "euclidean") -> GalleryIndex:
    ids = list(range(len(embeddings))) if photo_ids is None else list(photo_ids)
    return GalleryIndex(embeddings, ids, metric)


def retrieve_topk(index: GalleryIndex, query: np.ndarray, k: int) -> list[tuple[Hashable, float]]:
    """The k nearest gallery items, ascending by distance, ties by photo id."""
    if not 1 <= k <= index.n:
        raise ValueError(f"k must lie in [1, {index.n}], got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ShapeError(f"query must be a vector, got shape {query.shape}")
    dist = index.distances(query[None, :])[0]
    order = np.lexsort((index._rank_of_id, dist))[:k]
    return [(index.photo_ids[i], float(dist[i])) for i in order]


def target_ranks(index: GalleryIndex, queries: np.ndarray, targets: Sequence[Hashable], chunk: int = 64) -> np.ndarray:
    """0-based rank of each query's target under the retrieve_topk ordering."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(queries) != len(targets):
        raise ValueError("one target per query is required")
    try:
        pos = np.array([index._pos[t] for t in targets], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"unknown target photo id {exc.args[0]!r}") from None
    ranks = np.empty(len(queries), dtype=np.int64)
    key = index._rank_of_id
    for start in range(0, len(queries), chunk):
        d = index.distances(queries[start : start + chunk])
        p = pos[start : start + chunk]
        rows = np.arange(len(p))
        d_t = d[rows, p][:, None]
        before = (d < d_t) | ((d == d_t) & (key[None, :] < key[p][:, None]))
        ranks[start : start + chunk] = before.sum(axis=1)
    return ranks


def recall_at_k(index: GalleryIndex, queries: np.ndarray, targets: Sequence[Hashable], k: int) -> float:
    """Fraction of queries whose target id is among their k nearest gallery items."""
    if not 1 <= k <= index.n:
        raise ValueError(f"k must lie in [1, {index.n}], got {k}")
    if len(targets) == 0:
        return 0.0
    return float(np.mean(target_ranks(index, queries, targets) < k))


def metrics_record(run_id: str, k: int, recall: float, n_gallery: int, n_queries: int, seed: int) -> dict:
    return {
        "run_id": run_id,
        "k": int(k),
        "recall": float(recall),
        "n_gallery": int(n_gallery),
        "n_queries": int(n_queries),
        "seed": int(seed),
    }


def write_metrics_json(path: str | Path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
