"""Exact cosine top-k retrieval over a normalized gallery.

Brute-force scoring only: galleries at this scale are small enough that
exactness is cheap, and exact scores make every downstream metric
oracle-checkable. Ordering is deterministic: score descending, ties broken
by ascending item id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CirliteError
from .store import EmbeddingMatrix, ZeroVectorError, l2_normalize


class RetrievalError(CirliteError):
    """Invalid query, k, or subset for a retrieval call."""


@dataclass
class GalleryIndex:
    """Unit-normalized gallery rows with an id -> row map. Immutable."""

    ids: list[str]
    vectors: np.ndarray  # (count, dims) float64, unit rows
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._row_of = {item_id: i for i, item_id in enumerate(self.ids)}

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dims(self) -> int:
        return self.vectors.shape[1]


@dataclass
class RankedList:
    """Ordered (item id, cosine score) pairs for one query."""

    pairs: list[tuple[str, float]]

    @property
    def ids(self) -> list[str]:
        return [item_id for item_id, _ in self.pairs]

    @property
    def scores(self) -> list[float]:
        return [score for _, score in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


def build_index_from_vectors(ids, vectors) -> GalleryIndex:
    """Normalize raw gallery vectors into an index; zero rows are rejected."""
    vectors = np.asarray(vectors, dtype=np.float64)
    ids = list(ids)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise RetrievalError(
            f"expected ({len(ids)}, dims) vectors, got shape {vectors.shape}"
        )
    norms = np.linalg.norm(vectors, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise ZeroVectorError(
            f"gallery item {ids[int(zero_rows[0])]!r} has a zero embedding"
        )
    return GalleryIndex(ids=ids, vectors=vectors / norms[:, None])


def build_index(m: EmbeddingMatrix) -> GalleryIndex:
    """Build a search index from a stored embedding matrix."""
    return build_index_from_vectors(m.ids, m.values)


def _scores(idx: GalleryIndex, q) -> np.ndarray:
    return idx.vectors @ l2_normalize(q)


def search_topk(idx: GalleryIndex, q, k: int) -> RankedList:
    """The k highest-cosine gallery items (score desc, ties by id asc)."""
    if not 1 <= k <= idx.count:
        raise RetrievalError(f"k={k} outside [1, {idx.count}]")
    scores = _scores(idx, q)
    ids_arr = np.array(idx.ids)
    # lexsort uses the last key as primary: -score, then id ascending.
    order = np.lexsort((ids_arr, -scores))[:k]
    return RankedList([(idx.ids[i], float(scores[i])) for i in order])


def search_topk_batch(idx: GalleryIndex, q_mat, k: int) -> list[RankedList]:
    """Independent top-k searches, position-aligned with the query rows."""
    q_mat = np.asarray(q_mat, dtype=np.float64)
    return [search_topk(idx, q_mat[j], k) for j in range(q_mat.shape[0])]


def rank_of(idx: GalleryIndex, q, target_id: str) -> int:
    """1-based rank of the target under the full ordering rule."""
    row = idx._row_of.get(target_id)
    if row is None:
        raise RetrievalError(f"unknown target id: {target_id!r}")
    scores = _scores(idx, q)
    target_score = scores[row]
    better = int((scores > target_score).sum())
    tied_before = sum(
        1
        for i in np.flatnonzero(scores == target_score)
        if idx.ids[i] < target_id
    )
    return 1 + better + tied_before


def write_ranked_results(pair_ids, ranked_lists, path) -> None:
    """Export per-query rankings as JSONL: {pair_id, ranked_ids, scores}."""
    pair_ids, ranked_lists = list(pair_ids), list(ranked_lists)
    if len(pair_ids) != len(ranked_lists):
        raise RetrievalError(
            f"{len(pair_ids)} pair ids for {len(ranked_lists)} ranked lists"
        )
    with open(path, "w", encoding="utf-8") as handle:
        for pair_id, ranked in zip(pair_ids, ranked_lists):
            record = {
                "pair_id": pair_id,
                "ranked_ids": ranked.ids,
                "scores": ranked.scores,
            }
            handle.write(json.dumps(record) + "\n")


def subset_rank(idx: GalleryIndex, q, subset_ids, target_id: str) -> int:
    """Rank of the target among the subset members only (same ordering)."""
    subset_ids = list(subset_ids)
    if target_id not in subset_ids:
        raise RetrievalError(f"target {target_id!r} not in subset")
    rows = []
    for item_id in subset_ids:
        row = idx._row_of.get(item_id)
        if row is None:
            raise RetrievalError(f"subset id {item_id!r} not in gallery")
        rows.append(row)
    scores = _scores(idx, q)[rows]
    target_pos = subset_ids.index(target_id)
    target_score = scores[target_pos]
    rank = 1
    for i, item_id in enumerate(subset_ids):
        if i == target_pos:
            continue
        if scores[i] > target_score or (
            scores[i] == target_score and item_id < target_id
        ):
            rank += 1
    return rank
