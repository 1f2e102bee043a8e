"""Session-level re-ranking of context-free candidate lists.

The contextual strategy sorts candidates by ``|ctx(i) - ref|``, where
``ctx`` is the item's mean PCA value and ``ref`` the mean over the
session's seed (first played) items. Two baselines sort by cosine
similarity to the seed items instead: one over item rating columns, the
other over TF-IDF tag vectors.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .cf import CandidateList
from .ingest import RatingMatrix, Session
from .projection import ItemContextIndex
from .tagcorpus import normalize_tag

STRATEGIES = ("none", "pca", "rating-sim", "tfidf-sim")

SparseVector = Mapping[int, float]


@dataclass(frozen=True)
class SessionReference:
    session: Session
    seed_items: tuple[int, ...]
    reference: float


@dataclass(frozen=True)
class RankedList:
    items: tuple[int, ...]
    keys: tuple[float, ...]
    strategy: str

    def __len__(self) -> int:
        return len(self.items)


def _candidate_items(candidates: CandidateList | Sequence[int]) -> list[int]:
    if isinstance(candidates, CandidateList):
        return [int(i) for i in candidates.items]
    return [int(i) for i in candidates]


def unranked(candidates: CandidateList) -> RankedList:
    """The CF order itself, keyed by the CF score."""
    return RankedList(tuple(int(i) for i in candidates.items),
                      tuple(float(s) for s in candidates.scores), "none")


def session_reference(session: Session, k_seed: int, item_index: ItemContextIndex
                      ) -> SessionReference | None:
    """Mean context value of the indexed items among the first ``k_seed``.

    Returns None (skip) when the session has nothing left to predict after
    the seeds or when no seed item is indexed.
    """
    if k_seed < 1:
        raise ValueError("k_seed must be >= 1")
    if len(session.items) < k_seed + 1:
        return None
    seeds = tuple(session.items[:k_seed])
    vals = [item_index.values[i] for i in seeds if i in item_index.values]
    if not vals:
        return None
    return SessionReference(session, seeds, float(np.mean(vals)))


def contextual_rerank(
    candidates: CandidateList | Sequence[int],
    reference: SessionReference | float,
    item_index: ItemContextIndex,
    drop_unindexed: bool = False,
) -> RankedList:
    """Stable ascending sort by distance to the reference.

    Unindexed candidates keep their CF order after every indexed one, or
    are discarded when ``drop_unindexed`` is set.
    """
    ref = reference.reference if isinstance(reference, SessionReference) else float(reference)
    items = _candidate_items(candidates)
    indexed = [i for i in items if i in item_index.values]
    dist = np.array([abs(item_index.values[i] - ref) for i in indexed])
    order = np.argsort(dist, kind="stable")
    out_items = [indexed[k] for k in order]
    out_keys = [float(dist[k]) for k in order]
    if not drop_unindexed:
        rest = [i for i in items if i not in item_index.values]
        out_items += rest
        out_keys += [math.nan] * len(rest)
    return RankedList(tuple(out_items), tuple(out_keys), "pca")


def _norm(v: SparseVector) -> float:
    return math.sqrt(sum(x * x for x in v.values()))


def _mean_vector(vectors: Iterable[SparseVector]) -> dict[int, float]:
    vectors = list(vectors)
    acc: dict[int, float] = defaultdict(float)
    for v in vectors:
        for k, x in v.items():
            acc[k] += x
    return {k: x / len(vectors) for k, x in acc.items()} if vectors else {}


def _cosine(a: SparseVector, b: SparseVector, norm_b: float) -> float:
    norm_a = _norm(a)
    if norm_a == 0.0 or norm_b == 0.0:
        return math.nan
    if len(a) > len(b):
        a, b = b, a
    return sum(x * b.get(k, 0.0) for k, x in a.items()) / (norm_a * norm_b)


def similarity_rerank(
    candidates: CandidateList | Sequence[int],
    seed_items: Sequence[int],
    vectors: Mapping[int, SparseVector],
    strategy: str,
) -> RankedList:
    """Stable descending sort by cosine to the mean seed vector; undefined
    similarities (zero vectors) go last in CF order."""
    items = _candidate_items(candidates)
    ref = _mean_vector(vectors.get(i, {}) for i in seed_items)
    ref_norm = _norm(ref)
    sims = [_cosine(vectors.get(i, {}), ref, ref_norm) for i in items]
    defined = [k for k, s in enumerate(sims) if not math.isnan(s)]
    order = sorted(defined, key=lambda k: -sims[k])  # sorted() is stable
    order += [k for k, s in enumerate(sims) if math.isnan(s)]
    return RankedList(tuple(items[k] for k in order), tuple(sims[k] for k in order), strategy)


def rating_columns(ratings: RatingMatrix) -> dict[int, dict[int, float]]:
    """Each item's ratings keyed by user (missing entries are implicit zeros)."""
    cols: dict[int, dict[int, float]] = defaultdict(dict)
    for (u, i), r in ratings.ratings.items():
        cols[i][u] = r
    return dict(cols)


def rating_similarity_rerank(
    candidates: CandidateList | Sequence[int],
    seed_items: Sequence[int],
    ratings: RatingMatrix | Mapping[int, SparseVector],
) -> RankedList:
    cols = rating_columns(ratings) if isinstance(ratings, RatingMatrix) else ratings
    return similarity_rerank(candidates, seed_items, cols, "rating-sim")


class TfidfIndex:
    """Binary-TF x IDF tag vectors; ``idf(t) = ln(N / n_t)`` over the fitted items."""

    def __init__(self, item_tags: Mapping[int, Iterable[str]]):
        docs = {i: _tag_set(tags) for i, tags in item_tags.items()}
        docs = {i: d for i, d in docs.items() if d}
        self.n_docs = len(docs)
        df = Counter(t for d in docs.values() for t in d)
        self.tag_ids = {t: k for k, t in enumerate(sorted(df))}
        self.idf = {self.tag_ids[t]: math.log(self.n_docs / c) for t, c in df.items()}

    def vector(self, tags: Iterable[str]) -> dict[int, float]:
        out = {}
        for t in _tag_set(tags):
            k = self.tag_ids.get(t)
            if k is not None and self.idf[k] > 0.0:
                out[k] = self.idf[k]
        return out

    def vectors(self, item_tags: Mapping[int, Iterable[str]]) -> dict[int, dict[int, float]]:
        return {i: self.vector(tags) for i, tags in item_tags.items()}


def _tag_set(tags: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for raw in tags:
        t = normalize_tag(raw)
        if t:
            seen.setdefault(t, None)
    return list(seen)


def tfidf_similarity_rerank(
    candidates: CandidateList | Sequence[int],
    seed_items: Sequence[int],
    item_tags: Mapping[int, Iterable[str]],
    index: TfidfIndex | None = None,
) -> RankedList:
    """Cosine over TF-IDF vectors of raw tag lists; an index is fitted on
    ``item_tags`` when none is given."""
    if index is None:
        index = TfidfIndex(item_tags)
    needed = set(_candidate_items(candidates)) | set(seed_items)
    vecs = {i: index.vector(item_tags[i]) for i in needed if i in item_tags}
    return similarity_rerank(candidates, seed_items, vecs, "tfidf-sim")


def truncate(ranked: RankedList, n: int) -> RankedList:
    if n < 1:
        raise ValueError("N must be >= 1")
    return RankedList(ranked.items[:n], ranked.keys[:n], ranked.strategy)


def write_ranked(rows: Iterable[tuple[str, int, RankedList]], item_keys: list[str],
                 fh: IO[str]) -> None:
    """``user session_index rank item sort_key strategy`` lines."""
    for user_key, session_index, ranked in rows:
        for rank, (item, key) in enumerate(zip(ranked.items, ranked.keys), start=1):
            fh.write(f"{user_key}\t{session_index}\t{rank}\t{item_keys[item]}\t"
                     f"{key:.9g}\t{ranked.strategy}\n")
