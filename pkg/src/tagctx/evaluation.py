"""Per-session top-N evaluation: MAP@N and NDCG@N for every method x strategy cell.

A test session's first ``k_seed`` plays are the seeds. Relevance is the set
of the session's other distinct items (binary for MAP); NDCG uses the
user's training rating of each relevant item as its gain, so the ideal list
is the session's songs ordered by rating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

from .cf import Recommender, top_m
from .ingest import RatingMatrix, Session
from .postfilter import (
    STRATEGIES,
    RankedList,
    TfidfIndex,
    contextual_rerank,
    rating_columns,
    session_reference,
    similarity_rerank,
    truncate,
    unranked,
)
from .projection import ItemContextIndex

UNRATED_GAIN = 1.0


@dataclass(frozen=True)
class EvalConfig:
    n_values: tuple[int, ...] = (5, 10, 15)
    k_seed: int = 1
    candidates: int = 100
    strategies: tuple[str, ...] = STRATEGIES
    drop_unindexed: bool = False

    def __post_init__(self):
        if list(self.n_values) != sorted(self.n_values) or not self.n_values:
            raise ValueError("n_values must be a non-empty ascending sequence")
        if self.n_values[0] < 1 or self.n_values[-1] > self.candidates:
            raise ValueError("every N must lie in [1, candidates]")
        if self.k_seed < 1:
            raise ValueError("k_seed must be >= 1")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")


def relevance_sets(session: Session, k_seed: int, ratings: RatingMatrix | None
                   ) -> tuple[set[int], dict[int, float]]:
    """Distinct non-seed items of the session, and their graded gains.

    Items the user never rated in training get the floor gain of 1.
    """
    seeds = set(session.items[:k_seed])
    relevant = {i for i in session.items[k_seed:] if i not in seeds}
    gains = {}
    for i in relevant:
        r = ratings.get(session.user_id, i) if ratings is not None else None
        gains[i] = UNRATED_GAIN if r is None else r
    return relevant, gains


def average_precision_at_n(recommended: Sequence[int], relevant: set[int], n: int | None = None
                           ) -> float:
    """sum_k P@k * rel_k over the top N, divided by min(N, |relevant|)."""
    top = list(recommended if n is None else recommended[:n])
    n = len(top) if n is None else n
    if not relevant or n < 1:
        return 0.0
    hits, total = 0, 0.0
    for k, item in enumerate(top, start=1):
        if item in relevant:
            hits += 1
            total += hits / k
    return total / min(n, len(relevant))


def dcg(gains: Iterable[float]) -> float:
    return sum(g / math.log2(k + 1) for k, g in enumerate(gains, start=1))


def ndcg_at_n(recommended: Sequence[int], gains: Mapping[int, float], n: int | None = None
              ) -> float:
    top = list(recommended if n is None else recommended[:n])
    n = len(top) if n is None else n
    ideal = dcg(sorted((g for g in gains.values() if g > 0), reverse=True)[:n])
    if ideal <= 0.0:
        return math.nan
    return dcg(gains.get(i, 0.0) for i in top) / ideal


@dataclass
class Cell:
    ap_sum: float = 0.0
    ndcg_sum: float = 0.0
    evaluated: int = 0
    skipped: int = 0

    @property
    def map(self) -> float:
        return self.ap_sum / self.evaluated if self.evaluated else 0.0

    @property
    def ndcg(self) -> float:
        return self.ndcg_sum / self.evaluated if self.evaluated else 0.0


@dataclass
class EvalReport:
    cells: dict[tuple[str, str, int], Cell] = field(default_factory=dict)
    digest: dict[str, int] = field(default_factory=dict)
    skip_reasons: dict[str, dict[str, int]] = field(default_factory=dict)

    def cell(self, method: str, strategy: str, n: int) -> Cell:
        return self.cells[(method, strategy, n)]

    def write_tsv(self, fh: IO[str]) -> None:
        fh.write("method\tstrategy\tN\tMAP\tNDCG\tevaluated\tskipped\n")
        for (method, strategy, n), c in self.cells.items():
            fh.write(f"{method}\t{strategy}\t{n}\t{c.map:.10f}\t{c.ndcg:.10f}\t"
                     f"{c.evaluated}\t{c.skipped}\n")

    def table(self) -> str:
        lines = [", ".join(f"{k}={v}" for k, v in self.digest.items())]
        lines.append(f"{'method':<7} {'strategy':<10} {'N':>3} {'MAP':>8} {'NDCG':>8} "
                     f"{'eval':>6} {'skip':>6}")
        for (method, strategy, n), c in self.cells.items():
            lines.append(f"{method:<7} {strategy:<10} {n:>3} {c.map:>8.4f} {c.ndcg:>8.4f} "
                         f"{c.evaluated:>6} {c.skipped:>6}")
        return "\n".join(lines)


@dataclass
class ContextArtifacts:
    """Everything the post-filters need, fitted on the training split."""

    item_index: ItemContextIndex
    rating_vectors: Mapping[int, Mapping[int, float]]
    tfidf_vectors: Mapping[int, Mapping[int, float]]
    ratings: RatingMatrix | None = None

    @classmethod
    def build(cls, item_index: ItemContextIndex, ratings: RatingMatrix,
              item_tags: Mapping[int, Iterable[str]], tfidf: TfidfIndex) -> "ContextArtifacts":
        return cls(item_index, rating_columns(ratings), tfidf.vectors(item_tags), ratings)


def rerank(strategy: str, candidates, seeds: Sequence[int], reference, ctx: ContextArtifacts,
           drop_unindexed: bool = False) -> RankedList:
    if strategy == "none":
        return unranked(candidates)
    if strategy == "pca":
        return contextual_rerank(candidates, reference, ctx.item_index, drop_unindexed)
    if strategy == "rating-sim":
        return similarity_rerank(candidates, seeds, ctx.rating_vectors, "rating-sim")
    if strategy == "tfidf-sim":
        return similarity_rerank(candidates, seeds, ctx.tfidf_vectors, "tfidf-sim")
    raise ValueError(f"unknown strategy {strategy!r}")


def _skip_reason(session: Session, model: Recommender, cfg: EvalConfig,
                 ctx: ContextArtifacts, relevant: set[int]):
    if len(session.items) <= cfg.k_seed:
        return "too-short", None
    if not model.knows(session.user_id):
        return "cold-user", None
    ref = session_reference(session, cfg.k_seed, ctx.item_index)
    if ref is None:
        return "no-reference", None
    if not relevant:
        return "no-relevant", None
    return None, ref


def evaluate_fitted(
    test_sessions: Sequence[Session],
    models: Mapping[str, Recommender],
    ctx: ContextArtifacts,
    config: EvalConfig = EvalConfig(),
    digest: Mapping[str, int] | None = None,
) -> EvalReport:
    """Score every test session under every (method, strategy, N) cell.

    Candidates exclude only the session's seed items.
    """
    report = EvalReport(digest=dict(digest or {}))
    for method in models:
        for strategy in config.strategies:
            for n in config.n_values:
                report.cells[(method, strategy, n)] = Cell()
    for method, model in models.items():
        reasons: dict[str, int] = {}
        for session in test_sessions:
            relevant, gains = relevance_sets(session, config.k_seed, ctx.ratings)
            reason, ref = _skip_reason(session, model, config, ctx, relevant)
            if reason is not None:
                reasons[reason] = reasons.get(reason, 0) + 1
                for strategy in config.strategies:
                    for n in config.n_values:
                        report.cells[(method, strategy, n)].skipped += 1
                continue
            cands = top_m(model, session.user_id, config.candidates, ref.seed_items)
            for strategy in config.strategies:
                ranked = rerank(strategy, cands, ref.seed_items, ref, ctx, config.drop_unindexed)
                for n in config.n_values:
                    top = truncate(ranked, n).items
                    cell = report.cells[(method, strategy, n)]
                    cell.ap_sum += average_precision_at_n(top, relevant, n)
                    cell.ndcg_sum += ndcg_at_n(top, gains, n)
                    cell.evaluated += 1
        report.skip_reasons[method] = reasons
    return report
