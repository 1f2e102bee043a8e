"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s -q``.
"""

import io
import itertools
import math
import time

import numpy as np
import pytest

from tagctx.cli import main
from tagctx.embedding import (
    TrainConfig,
    init_model,
    nll_gradients,
    softmax_distribution,
    train,
)
from tagctx.evaluation import EvalConfig, average_precision_at_n, ndcg_at_n
from tagctx.ingest import PlayEvent, segment_sessions
from tagctx.pipeline import PipelineSettings, load_dataset, run_texts, stage_seed
from tagctx.postfilter import contextual_rerank
from tagctx.projection import ItemContextIndex, fit_pca, project
from tagctx.synthetic import SyntheticSpec, generate_synthetic, two_community_spec
from tagctx.tagcorpus import build_sentences, build_vocabulary

from test_embedding import fd_gradients, random_model
from test_projection import explicit_covariance, jacobi_eigen


@pytest.fixture
def emit(capsys):
    def _emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _emit


def test_01_softmax_normalization(emit):
    rng = np.random.default_rng(100)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 51)), int(rng.integers(1, 17))
        m = random_model(rng, n, d, scale=float(rng.uniform(0.1, 3.0)))
        for t in range(n):
            worst = max(worst, abs(softmax_distribution(m, t).sum() - 1.0))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    assert emit(1, ok, f"max |sum p - 1| = {worst:.2e}, {elapsed:.2f}s")


def test_02_gradient_check(emit):
    rng = np.random.default_rng(200)
    start = time.perf_counter()
    m = random_model(rng, 12, 6, scale=0.5)
    pairs = rng.integers(0, 12, (200, 2))
    analytic = nll_gradients(m, pairs)
    numeric = fd_gradients(m, pairs, h=1e-5)
    rel = max(float((np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)).max())
              for a, b in zip(analytic, numeric))
    elapsed = time.perf_counter() - start
    assert emit(2, rel < 1e-4 and elapsed < 5.0, f"max relative error {rel:.2e}, {elapsed:.2f}s")


def separation_error(values, labels):
    """Smallest misclassified fraction over all thresholds and both orientations."""
    order = np.argsort(values)
    lab = np.asarray(labels)[order]
    best = len(lab)
    for cut in range(len(lab) + 1):
        left, right = lab[:cut], lab[cut:]
        errs = min(np.sum(left != 0) + np.sum(right != 1), np.sum(left != 1) + np.sum(right != 0))
        best = min(best, int(errs))
    return best / len(lab)


def test_03_embedding_separation(emit):
    start = time.perf_counter()
    data = generate_synthetic(two_community_spec(), stage_seed(0, "synth"))
    ds = load_dataset(io.StringIO(data.play_log()), io.StringIO(data.tag_csv))
    vocab, sentences = build_vocabulary(build_sentences(ds.item_tags), min_count=2)
    cfg = TrainConfig(rng_seed=stage_seed(0, "embed"))
    model = train(init_model(vocab, cfg), sentences, cfg)
    tags = [t for t in vocab.tags if data.tag_context.get(t, -1) >= 0]
    labels = [data.tag_context[t] for t in tags]
    x = model.input_vectors[[vocab.index[t] for t in tags]]
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    cos = unit @ unit.T
    same = np.equal.outer(labels, labels)
    off = ~np.eye(len(tags), dtype=bool)
    intra, inter = cos[same & off].mean(), cos[~same].mean()
    pca = fit_pca(model.input_vectors, 1)
    err = separation_error(project(pca, x)[:, 0], labels)
    elapsed = time.perf_counter() - start
    ok = intra - inter >= 0.2 and err <= 0.05 and elapsed < 60
    assert emit(3, ok, f"intra {intra:.3f} vs inter {inter:.3f} (gap {intra - inter:.3f}), "
                       f"1-D misclassified {err:.1%}, {elapsed:.1f}s")


def test_04_pca_oracle(emit):
    rng = np.random.default_rng(400)
    start = time.perf_counter()
    worst_eval, worst_vec = 0.0, 0.0
    for _ in range(50):
        x = rng.normal(size=(20, 5))
        pca = fit_pca(x, 5)
        evals, evecs = jacobi_eigen(explicit_covariance(x))
        order = np.argsort(-evals)
        worst_eval = max(worst_eval, float(np.abs(pca.eigenvalues - evals[order]).max()))
        for k, j in enumerate(order):
            worst_vec = max(worst_vec, abs(abs(float(pca.components[k] @ evecs[:, j])) - 1.0))
    hand = fit_pca(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), 1)
    hand_ok = (abs(hand.eigenvalues[0] - 2.0) < 1e-12
               and np.allclose(hand.components[0], [1 / math.sqrt(2)] * 2, atol=1e-12))
    elapsed = time.perf_counter() - start
    ok = worst_eval < 1e-8 and worst_vec < 1e-8 and hand_ok and elapsed < 5
    assert emit(4, ok, f"max eigenvalue diff {worst_eval:.1e}, component |cos| gap {worst_vec:.1e}, "
                       f"hand case {'ok' if hand_ok else 'wrong'}, {elapsed:.2f}s")


def test_05_rerank_oracle(emit):
    rng = np.random.default_rng(500)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        items = rng.permutation(200)[:n].tolist()
        # dyadic values keep shifts and flips exact in floating point
        vals = {i: float(v) / 8 for i, v in zip(items, rng.integers(-40, 41, n))}
        ref = float(rng.integers(-40, 41)) / 8
        shift = float(rng.integers(-80, 81)) / 8
        oracle = [i for _, _, i in sorted((abs(vals[i] - ref), pos, i) for pos, i in enumerate(items))]
        base = contextual_rerank(items, ref, ItemContextIndex(vals)).items
        moved = contextual_rerank(items, ref + shift,
                                  ItemContextIndex({i: v + shift for i, v in vals.items()})).items
        flipped = contextual_rerank(items, -ref, ItemContextIndex({i: -v for i, v in vals.items()})).items
        mismatches += not (list(base) == oracle and base == moved == flipped)
    assert emit(5, mismatches == 0, f"{mismatches} mismatches over 1000 fuzzed instances")


def test_06_metric_oracles(emit):
    failures = 0
    for length in range(1, 9):
        items = list(range(length))
        for pattern in itertools.product([0, 1], repeat=length):
            for extra in (0, 2):
                relevant = {i for i, p in zip(items, pattern) if p} | {100 + e for e in range(extra)}
                if not relevant:
                    continue
                for n in range(1, length + 1):
                    hits, total = 0, 0.0
                    for k in range(1, n + 1):
                        if pattern[k - 1]:
                            hits += 1
                            total += hits / k
                    failures += average_precision_at_n(items, relevant, n) != total / min(n, len(relevant))
        for gl in itertools.product([0.0, 1.0, 3.0], repeat=length):
            gains = {i: g for i, g in enumerate(gl) if g}
            if not gains:
                continue
            for n in range(1, length + 1):
                dcg = sum(gl[k] / math.log2(k + 2) for k in range(n))
                ideal = sorted(gains.values(), reverse=True)[:n]
                idcg = sum(g / math.log2(k + 2) for k, g in enumerate(ideal))
                failures += ndcg_at_n(items, gains, n) != dcg / idcg
    ap_hand = average_precision_at_n([7, 1, 8, 2, 3], {7, 8}, 5)
    nd_hand = ndcg_at_n([9, 1], {1: 4.0}, 2)
    hand_ok = abs(ap_hand - 5 / 6) <= 1e-12 and abs(nd_hand - 1 / math.log2(3)) <= 1e-12
    assert emit(6, failures == 0 and hand_ok,
                f"{failures} exhaustive mismatches; AP {ap_hand:.12f}, NDCG {nd_hand:.12f}")


def test_07_directional_reproduction(emit):
    start = time.perf_counter()
    data = generate_synthetic(SyntheticSpec(), stage_seed(0, "synth"))
    settings = PipelineSettings(seed=0, min_count=2, eval=EvalConfig(candidates=30))
    report, *_ = run_texts(data.play_log(), data.tag_csv, settings)
    ok, parts = True, []
    for method in ("knn", "svd"):
        for metric in ("map", "ndcg"):
            vals = {s: getattr(report.cell(method, s, 10), metric)
                    for s in ("none", "pca", "rating-sim", "tfidf-sim")}
            lift = vals["pca"] / vals["none"] - 1.0 if vals["none"] > 0 else math.inf
            beats = vals["pca"] > max(vals["rating-sim"], vals["tfidf-sim"])
            ok &= lift >= 0.2 and beats
            parts.append(f"{method} {metric.upper()}@10 {vals['none']:.3f}->{vals['pca']:.3f} "
                         f"({lift:+.0%}, baselines {vals['rating-sim']:.3f}/{vals['tfidf-sim']:.3f})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 600
    assert emit(7, ok, "; ".join(parts) + f"; {elapsed:.1f}s")


def test_08_sessionization(emit):
    rng = np.random.default_rng(800)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        events, t = [], 1_240_000_000
        for k, gap in enumerate(rng.choice([30, 600, 899, 900, 901, 4000], int(rng.integers(1, 40)))):
            t += int(gap)
            events.append(PlayEvent(0, t, 0, k))
        sessions = segment_sessions(events)
        flat = [(ts, it) for s in sessions for it, ts in zip(s.items, s.timestamps)]
        bad += flat != [(e.timestamp, e.track_id) for e in events]
        bad += any(b - a > 900 for s in sessions for a, b in zip(s.timestamps, s.timestamps[1:]))
        bad += any(b.timestamps[0] - a.timestamps[-1] <= 900 for a, b in zip(sessions, sessions[1:]))
    elapsed = time.perf_counter() - start
    assert emit(8, bad == 0 and elapsed < 5, f"{bad} violations over 1000 histories, {elapsed:.2f}s")


ACCEPTANCE_CONFIG = {"seed": "0", "corpus.min_count": "2", "postfilter.candidates": "30"}
STAGES = [["corpus"], ["train-embed"], ["pca"], ["train-cf", "--method", "all"], ["evaluate"]]


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert main(["synth", "--out", str(root / "data"), "--seed=0"]) == 0
    works = []
    for name in ("a", "b"):
        conf = root / f"{name}.conf"
        conf.write_text("".join(f"{k}={v}\n" for k, v in dict(
            ACCEPTANCE_CONFIG, **{"paths.play_log": root / "data" / "plays.tsv",
                                  "paths.tags": root / "data" / "tags.csv",
                                  "paths.workdir": root / name}).items()))
        assert main(["ingest", "--config", str(conf)]) == 0
        for stage in STAGES:
            assert main([stage[0], "--config", str(conf), *stage[1:]]) == 0
        works.append(root / name)
    return works


@pytest.mark.slow
def test_09_determinism(emit, cli_runs):
    a, b = cli_runs
    names = sorted(p.name for p in a.iterdir() if not p.name.startswith("."))
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    models = [n for n in names if n.startswith("model_")]
    ok = not differing and len(models) == 4 and "report.tsv" in names
    assert emit(9, ok, f"{len(names)} artifacts compared ({len(models)} model files + report), "
                       f"{len(differing)} differ {differing or ''}")


@pytest.mark.slow
def test_10_grid_completeness(emit, cli_runs):
    lines = (cli_runs[0] / "report.tsv").read_text().splitlines()
    cells = {tuple(l.split("\t")[:3]) for l in lines[1:]}
    want = {(m, s, str(n)) for m in ("knn", "svd", "svdpp", "nmf")
            for s in ("none", "pca", "rating-sim", "tfidf-sim") for n in (5, 10, 15)}
    ok = cells == want and len(lines) == 49
    assert emit(10, ok, f"{len(cells)} distinct cells in report.tsv")


@pytest.mark.slow
def test_cli_report_matches_in_memory_pipeline(cli_runs):
    data = generate_synthetic(SyntheticSpec(), stage_seed(0, "synth"))
    settings = PipelineSettings(seed=0, min_count=2, eval=EvalConfig(candidates=30))
    report, *_ = run_texts(data.play_log(), data.tag_csv, settings)
    buf = io.StringIO()
    report.write_tsv(buf)
    assert buf.getvalue() == (cli_runs[0] / "report.tsv").read_text()
