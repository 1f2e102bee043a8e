"""In-memory end-to-end pipeline: fit every artifact on the training split, then evaluate.

All fitted artifacts (ratings, tag corpus, embedding, PCA, TF-IDF statistics,
CF models) see the training sessions only. Item tags are catalog metadata
and are indexed for every catalog item.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .cf import METHODS, MfConfig, Recommender, train_cf
from .embedding import EmbeddingModel, TrainConfig, init_model, train
from .evaluation import ContextArtifacts, EvalConfig, EvalReport, evaluate_fitted
from .ingest import (
    Catalog,
    RatingMatrix,
    Session,
    derive_implicit_ratings,
    join_item_tags,
    parse_play_log,
    parse_tag_assignments,
    segment_sessions,
    session_events,
    split_sessions,
)
from .postfilter import TfidfIndex
from .projection import ItemContextIndex, PcaModel, fit_pca, item_mean_pca
from .tagcorpus import TagSentence, Vocabulary, build_sentences, build_vocabulary

log = logging.getLogger(__name__)

# one global seed fans out to independent per-stage streams
SEED_OFFSETS = {"split": 1, "embed": 2, "knn": 3, "svd": 4, "svdpp": 5, "nmf": 6, "synth": 7}


def stage_seed(seed: int, stage: str) -> int:
    return seed + SEED_OFFSETS[stage]


@dataclass(frozen=True)
class PipelineSettings:
    seed: int = 0
    gap_seconds: int = 900
    tag_sep: str = ";"
    train_fraction: float = 0.8
    min_count: int = 10
    embed: TrainConfig = TrainConfig()
    knn_k: int = 40
    knn_similarity: str = "cosine"
    mf: Mapping[str, MfConfig] = field(default_factory=lambda: {m: MfConfig() for m in METHODS[1:]})
    methods: tuple[str, ...] = METHODS
    eval: EvalConfig = EvalConfig()

    def embed_config(self) -> TrainConfig:
        return replace(self.embed, rng_seed=stage_seed(self.seed, "embed"))

    def mf_config(self, method: str) -> MfConfig:
        return replace(self.mf.get(method, MfConfig()), seed=stage_seed(self.seed, method))


@dataclass
class Dataset:
    catalog: Catalog
    sessions: list[Session]
    item_tags: dict[int, list[str]]
    n_events: int
    skipped_lines: int

    def digest(self) -> dict[str, int]:
        return {"users": self.catalog.n_users, "items": self.catalog.n_items,
                "events": self.n_events, "sessions": len(self.sessions)}


def load_dataset(play_log: Iterable[str], tags_csv: Iterable[str], gap_seconds: int = 900,
                 tag_sep: str = ";") -> Dataset:
    parsed = parse_play_log(play_log)
    sessions = segment_sessions(parsed.events, gap_seconds)
    item_tags = join_item_tags(parsed.catalog, parse_tag_assignments(tags_csv, tag_sep))
    return Dataset(parsed.catalog, sessions, item_tags, len(parsed.events), parsed.skipped)


@dataclass
class Fitted:
    ratings: RatingMatrix
    vocab: Vocabulary
    sentences: list[TagSentence]
    embedding: EmbeddingModel
    pca: PcaModel
    item_index: ItemContextIndex
    tfidf: TfidfIndex
    models: dict[str, Recommender]

    def context(self, item_tags: Mapping[int, Iterable[str]]) -> ContextArtifacts:
        return ContextArtifacts.build(self.item_index, self.ratings, item_tags, self.tfidf)


def train_items(sessions: Iterable[Session]) -> set[int]:
    return {i for s in sessions for i in s.items}


def fit_corpus(item_tags: Mapping[int, Iterable[str]], items: Iterable[int], min_count: int):
    subset = {i: item_tags.get(i, []) for i in sorted(set(items))}
    return build_vocabulary(build_sentences(subset), min_count)


def fit(train_sessions: Sequence[Session], catalog: Catalog,
        item_tags: Mapping[int, Sequence[str]], settings: PipelineSettings) -> Fitted:
    ratings = derive_implicit_ratings(session_events(train_sessions, catalog), catalog)
    items = train_items(train_sessions)
    vocab, sentences = fit_corpus(item_tags, items, settings.min_count)
    cfg = settings.embed_config()
    embedding = train(init_model(vocab, cfg), sentences, cfg)
    pca = fit_pca(embedding.input_vectors, 1)
    item_index = item_mean_pca(item_tags, pca, embedding, catalog.n_items)
    tfidf = TfidfIndex({i: item_tags.get(i, []) for i in sorted(items)})
    models = {}
    for method in settings.methods:
        models[method] = train_cf(ratings, method, k=settings.knn_k,
                                  similarity=settings.knn_similarity,
                                  mf=settings.mf_config(method))
        log.info("trained %s", method)
    return Fitted(ratings, vocab, sentences, embedding, pca, item_index, tfidf, models)


def run(dataset: Dataset, settings: PipelineSettings = PipelineSettings()
        ) -> tuple[EvalReport, Fitted, list[Session], list[Session]]:
    train_s, test_s = split_sessions(dataset.sessions, settings.train_fraction,
                                     stage_seed(settings.seed, "split"))
    fitted = fit(train_s, dataset.catalog, dataset.item_tags, settings)
    report = evaluate_fitted(test_s, fitted.models, fitted.context(dataset.item_tags),
                             settings.eval, dataset.digest())
    return report, fitted, train_s, test_s


def run_texts(play_log: str, tags_csv: str, settings: PipelineSettings = PipelineSettings()):
    data = load_dataset(io.StringIO(play_log), io.StringIO(tags_csv),
                        settings.gap_seconds, settings.tag_sep)
    return run(data, settings)
