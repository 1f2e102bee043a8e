import io
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagctx.cf import CandidateList
from tagctx.ingest import RatingMatrix, Session
from tagctx.postfilter import (
    RankedList,
    TfidfIndex,
    contextual_rerank,
    rating_columns,
    rating_similarity_rerank,
    session_reference,
    tfidf_similarity_rerank,
    truncate,
    unranked,
    write_ranked,
)
from tagctx.projection import ItemContextIndex


def cands(items, scores=None):
    scores = scores if scores is not None else list(range(len(items), 0, -1))
    return CandidateList(0, np.array(items), np.array(scores, dtype=float))


def session(items):
    return Session(0, 0, tuple(items), tuple(range(len(items))))


class TestReference:
    def test_single_seed(self):
        idx = ItemContextIndex({0: 0.37, 1: 0.9})
        assert session_reference(session([0, 1]), 1, idx).reference == pytest.approx(0.37)

    def test_two_seeds(self):
        idx = ItemContextIndex({0: 0.2, 1: 0.6})
        assert session_reference(session([0, 1, 2]), 2, idx).reference == pytest.approx(0.4)

    def test_partial_seed_index(self):
        idx = ItemContextIndex({1: 0.6})
        ref = session_reference(session([0, 1, 2]), 2, idx)
        assert ref.reference == pytest.approx(0.6) and ref.seed_items == (0, 1)

    def test_unindexed_seed(self):
        assert session_reference(session([0, 1]), 1, ItemContextIndex({1: 0.5})) is None

    def test_too_short(self):
        assert session_reference(session([0]), 1, ItemContextIndex({0: 0.5})) is None


class TestContextual:
    def test_worked_example(self):
        idx = ItemContextIndex({10: 0.9, 11: 0.4, 12: 0.1})
        out = contextual_rerank(cands([10, 11, 12]), 0.4, idx)
        assert out.items == (11, 12, 10)
        np.testing.assert_allclose(out.keys, [0.0, 0.3, 0.5], atol=1e-12)

    def test_shared_index_keeps_order(self):
        idx = ItemContextIndex({i: 0.25 for i in range(6)})
        assert contextual_rerank(cands([3, 1, 5, 0]), 0.7, idx).items == (3, 1, 5, 0)

    def test_unindexed_sink_or_drop(self):
        idx = ItemContextIndex({1: 0.0, 3: 1.0})
        assert contextual_rerank(cands([0, 3, 2, 1]), 0.1, idx).items == (1, 3, 0, 2)
        assert contextual_rerank(cands([0, 3, 2, 1]), 0.1, idx, drop_unindexed=True).items == (1, 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_fifty_candidates_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        values = np.round(rng.normal(size=50), 1)  # rounding forces ties
        idx = ItemContextIndex({i: float(v) for i, v in enumerate(values)})
        order = rng.permutation(50).tolist()
        ref = float(rng.normal())
        want = [i for _, _, i in sorted((abs(values[i] - ref), pos, i) for pos, i in enumerate(order))]
        assert list(contextual_rerank(cands(order), ref, idx).items) == want

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-20, 20), min_size=1, max_size=15), st.integers(-20, 20),
           st.integers(-50, 50))
    def test_invariances(self, vals, ref, shift):
        items = list(range(len(vals)))
        base = contextual_rerank(cands(items), ref / 4, ItemContextIndex({i: v / 4 for i, v in enumerate(vals)}))
        moved = contextual_rerank(cands(items), (ref + shift) / 4,
                                  ItemContextIndex({i: (v + shift) / 4 for i, v in enumerate(vals)}))
        flipped = contextual_rerank(cands(items), -ref / 4,
                                    ItemContextIndex({i: -v / 4 for i, v in enumerate(vals)}))
        assert base.items == moved.items == flipped.items
        assert Counter(base.items) == Counter(items)
        again = contextual_rerank(list(base.items), ref / 4,
                                  ItemContextIndex({i: v / 4 for i, v in enumerate(vals)}))
        assert again.items == base.items

    def test_reference_equal_everywhere_is_identity(self):
        idx = ItemContextIndex({i: 0.5 for i in range(5)})
        assert contextual_rerank(cands([4, 2, 0, 1, 3]), 0.5, idx).items == (4, 2, 0, 1, 3)


def toy_ratings():
    # rows users, columns items
    grid = [
        [5, 3, 0, 1, 4],
        [4, 0, 0, 1, 5],
        [1, 1, 0, 5, 0],
        [0, 1, 0, 4, 2],
        [2, 0, 0, 0, 3],
    ]
    entries = {(u, i): float(x) for u, row in enumerate(grid) for i, x in enumerate(row) if x}
    return grid, RatingMatrix(5, 5, entries, {k: 1 for k in entries})


def hand_cos(a, b):
    num = sum(x * y for x, y in zip(a, b))
    return num / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


class TestRatingSimilarity:
    def test_toy_matrix(self):
        grid, r = toy_ratings()
        col = lambda i: [grid[u][i] for u in range(5)]
        out = rating_similarity_rerank(cands([1, 2, 3, 4]), [0], r)
        want = {i: hand_cos(col(i), col(0)) for i in (1, 3, 4)}
        assert out.items == (4, 1, 3, 2)  # item 2 unrated -> last
        for item, key in zip(out.items[:3], out.keys[:3]):
            assert key == pytest.approx(want[item], abs=1e-12)
        assert math.isnan(out.keys[3])

    def test_identical_column_first(self):
        entries = {(0, 0): 3.0, (1, 0): 1.0, (0, 1): 3.0, (1, 1): 1.0, (0, 2): 5.0}
        r = RatingMatrix(2, 3, entries, {})
        out = rating_similarity_rerank(cands([2, 1]), [0], r)
        assert out.items[0] == 1 and out.keys[0] == pytest.approx(1.0)

    def test_two_seed_mean(self):
        grid, r = toy_ratings()
        col = lambda i: [grid[u][i] for u in range(5)]
        mean = [(a + b) / 2 for a, b in zip(col(0), col(3))]
        out = rating_similarity_rerank(cands([1, 4]), [0, 3], rating_columns(r))
        got = dict(zip(out.items, out.keys))
        assert got[1] == pytest.approx(hand_cos(col(1), mean))
        assert got[4] == pytest.approx(hand_cos(col(4), mean))


class TestTfidf:
    corpus = {0: ["rock", "pop"], 1: ["rock"], 2: ["rock", "jazz"], 3: ["Pop"], 4: ["metal"]}

    def test_idf(self):
        index = TfidfIndex({i: t for i, t in self.corpus.items() if i < 4})
        assert index.n_docs == 4
        rock, pop, jazz = (index.tag_ids[t] for t in ("rock", "pop", "jazz"))
        assert index.idf[rock] == pytest.approx(math.log(4 / 3))
        assert index.idf[pop] == pytest.approx(math.log(2))
        assert index.idf[jazz] == pytest.approx(math.log(4))

    def test_hand_cosines(self):
        fitted = {i: t for i, t in self.corpus.items() if i < 4}
        index = TfidfIndex(fitted)
        a, b, c = math.log(4 / 3), math.log(2), math.log(4)
        seed = [a, b, 0]
        want = {1: hand_cos([a, 0, 0], seed), 2: hand_cos([a, 0, c], seed), 3: hand_cos([0, b, 0], seed)}
        out = tfidf_similarity_rerank(cands([1, 2, 3, 4]), [0], self.corpus, index)
        assert out.items == (3, 1, 2, 4)  # "metal" is outside the fitted vocabulary
        for item, key in zip(out.items[:3], out.keys[:3]):
            assert key == pytest.approx(want[item], abs=1e-12)

    def test_same_tags_and_disjoint(self):
        tags = {0: ["x", "y"], 1: ["y", "x"], 2: ["z"], 3: ["w"]}
        out = tfidf_similarity_rerank(cands([2, 1]), [0], tags)
        assert out.items == (1, 2)
        assert out.keys[0] == pytest.approx(1.0) and out.keys[1] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=10, unique=True), st.integers(0, 9))
def test_every_strategy_permutes(items, seed):
    _, r = toy_ratings()
    r = RatingMatrix(5, 10, r.ratings, {})
    tags = {i: [f"t{i % 3}", f"u{i % 2}"] for i in range(10)}
    idx = ItemContextIndex({i: i / 10 for i in range(0, 10, 2)})
    outs = [unranked(cands(items)), contextual_rerank(cands(items), 0.3, idx),
            rating_similarity_rerank(cands(items), [seed], r),
            tfidf_similarity_rerank(cands(items), [seed], tags)]
    for out in outs:
        assert Counter(out.items) == Counter(items)


def test_truncate():
    ranked = RankedList(tuple(range(100)), tuple(range(100)), "none")
    assert truncate(ranked, 5).items == (0, 1, 2, 3, 4)
    assert truncate(ranked, 500).items == ranked.items
    with pytest.raises(ValueError):
        truncate(ranked, 0)


def test_rerank_before_truncate_matters():
    idx = ItemContextIndex({0: 1.0, 1: 0.9, 2: 0.0})
    c = cands([0, 1, 2])
    first = truncate(contextual_rerank(c, 0.0, idx), 2).items
    late = contextual_rerank(list(truncate(unranked(c), 2).items), 0.0, idx).items
    assert first == (2, 1) and late == (1, 0)
    assert first != late


def test_write_ranked():
    buf = io.StringIO()
    write_ranked([("alice", 3, RankedList((1, 0), (0.0, 0.25), "pca"))], ["a", "b"], buf)
    assert buf.getvalue() == "alice\t3\t1\tb\t0\tpca\nalice\t3\t2\ta\t0.25\tpca\n"
