"""Command-line driver: every pipeline stage as a subcommand over a work directory.

Stages communicate only through plain-text artifacts in the work directory,
so any stage can be rerun on its own. Settings come from a flat
``key=value`` file (``--config``) and can be overridden per call with
``--key=value`` flags, e.g. ``--embed.epochs=5``.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock, Timeout

from . import __version__
from .cf import METHODS, MfConfig, read_model, top_m, train_cf
from .embedding import EmbeddingModel, TrainConfig, init_model, train
from .errors import ColdUserError, ConfigError, DivergenceError, StageError, TagctxError
from .evaluation import ContextArtifacts, EvalConfig, evaluate_fitted, rerank
from .ingest import (
    Catalog,
    derive_implicit_ratings,
    read_catalog,
    read_item_tags,
    read_ratings,
    read_sessions,
    session_events,
    split_sessions,
    write_catalog,
    write_item_tags,
    write_ratings,
    write_sessions,
)
from .pipeline import fit_corpus, load_dataset, stage_seed, train_items
from .postfilter import STRATEGIES, SessionReference, TfidfIndex, truncate, unranked, write_ranked
from .projection import ItemContextIndex, emit_scatter, fit_pca, item_mean_pca
from .synthetic import SyntheticSpec, generate_synthetic
from .tagcorpus import Vocabulary, read_sentences, write_sentences

log = logging.getLogger("tagctx")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

_MF_DEFAULTS = MfConfig()
DEFAULTS: dict[str, str] = {
    "paths.play_log": "",
    "paths.tags": "",
    "paths.workdir": "work",
    "seed": "0",
    "ingest.gap_seconds": "900",
    "ingest.tag_sep": ";",
    "ingest.train_fraction": "0.8",
    "corpus.min_count": "10",
    "embed.dim": "50",
    "embed.epochs": "20",
    "embed.learning_rate": "0.025",
    "embed.min_lr_fraction": "0.0001",
    "embed.shuffle": "true",
    "cf.methods": ",".join(METHODS),
    "cf.knn.k": "40",
    "cf.knn.similarity": "cosine",
    "postfilter.k_seed": "1",
    "postfilter.candidates": "100",
    "postfilter.drop_unindexed": "false",
    "eval.n_values": "5,10,15",
    "eval.strategies": ",".join(STRATEGIES),
    "plot.min_count": "11",
}
for _m in METHODS[1:]:
    for _f in ("factors", "epochs", "lr", "reg", "init_std"):
        DEFAULTS[f"cf.{_m}.{_f}"] = repr(getattr(_MF_DEFAULTS, _f))
for _f in fields(SyntheticSpec):
    DEFAULTS[f"synth.{_f.name}"] = repr(_f.default)

# work-directory artifacts and the stage that writes each
ARTIFACTS = {
    "catalog.tsv": "ingest",
    "sessions.tsv": "ingest",
    "train_sessions.tsv": "ingest",
    "test_sessions.tsv": "ingest",
    "ratings.tsv": "ingest",
    "item_tags.tsv": "ingest",
    "digest.tsv": "ingest",
    "vocab.tsv": "corpus",
    "sentences.tsv": "corpus",
    "embedding.txt": "train-embed",
    "embed_loss.tsv": "train-embed",
    "pca.txt": "pca",
    "item_index.tsv": "pca",
}


# --- configuration ---------------------------------------------------------

class Config:
    """String-valued settings with typed accessors; unknown keys are rejected."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = value

    def get_str(self, key: str) -> str:
        return self.values[key]

    def _typed(self, key: str, cast: Callable):
        try:
            return cast(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {self.values[key]!r}") from None

    def get_int(self, key: str) -> int:
        return self._typed(key, int)

    def get_float(self, key: str) -> float:
        return self._typed(key, float)

    def get_bool(self, key: str) -> bool:
        v = self.values[key].strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {self.values[key]!r}")

    def get_list(self, key: str) -> list[str]:
        return [x.strip() for x in self.values[key].split(",") if x.strip()]

    @property
    def workdir(self) -> Path:
        return Path(self.get_str("paths.workdir"))

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, dim=self.get_int("embed.dim"), epochs=self.get_int("embed.epochs"),
                      learning_rate=self.get_float("embed.learning_rate"),
                      min_lr_fraction=self.get_float("embed.min_lr_fraction"),
                      shuffle=self.get_bool("embed.shuffle"),
                      rng_seed=stage_seed(self.get_int("seed"), "embed"))

    def mf_config(self, method: str) -> MfConfig:
        p = f"cf.{method}."
        return _build(MfConfig, factors=self.get_int(p + "factors"), epochs=self.get_int(p + "epochs"),
                      lr=self.get_float(p + "lr"), reg=self.get_float(p + "reg"),
                      init_std=self.get_float(p + "init_std"),
                      seed=stage_seed(self.get_int("seed"), method))

    def methods(self) -> list[str]:
        methods = self.get_list("cf.methods")
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ConfigError(f"cf.methods: unknown or empty {bad or methods}")
        return methods

    def eval_config(self) -> EvalConfig:
        try:
            n_values = tuple(int(x) for x in self.get_list("eval.n_values"))
        except ValueError:
            raise ConfigError(f"eval.n_values: bad list {self.get_str('eval.n_values')!r}") from None
        return _build(EvalConfig, n_values=n_values, k_seed=self.get_int("postfilter.k_seed"),
                      candidates=self.get_int("postfilter.candidates"),
                      strategies=tuple(self.get_list("eval.strategies")),
                      drop_unindexed=self.get_bool("postfilter.drop_unindexed"))

    def synthetic_spec(self) -> SyntheticSpec:
        kwargs = {}
        for f in fields(SyntheticSpec):
            cast = type(f.default)
            kwargs[f.name] = self._typed(f"synth.{f.name}", cast)
        return _build(SyntheticSpec, **kwargs)


def _build(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(_open_input(path), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(tokens: Sequence[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unrecognized argument {tok!r} (overrides take the form --key=value)")
        key, _, value = tok[2:].partition("=")
        out[key] = value
    return out


# --- work directory helpers ------------------------------------------------

def _open_input(path: Path):
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    return path.open(encoding="utf-8")


def _artifact(cfg: Config, name: str, stage: str | None = None) -> Path:
    path = cfg.workdir / name
    if not path.is_file():
        stage = stage or ARTIFACTS.get(name, "?")
        raise StageError(f"missing {path}; run the '{stage}' stage first")
    return path


def _read_text(cfg: Config, name: str, stage: str | None = None) -> io.StringIO:
    return io.StringIO(_artifact(cfg, name, stage).read_text(encoding="utf-8"))


def _write(cfg: Config, name: str, writer: Callable[[io.StringIO], object]) -> Path:
    """Render with ``writer`` into memory, then replace the artifact atomically."""
    buf = io.StringIO()
    writer(buf)
    path = cfg.workdir / name
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)
    return path


def _catalog(cfg: Config) -> Catalog:
    return read_catalog(_read_text(cfg, "catalog.tsv"))


def _digest(cfg: Config) -> dict[str, int]:
    out = {}
    for line in _read_text(cfg, "digest.tsv"):
        if line.strip():
            k, v = line.rstrip("\n").split("\t")
            out[k] = int(v)
    return out


def _embedding(cfg: Config) -> tuple[Vocabulary, EmbeddingModel]:
    vocab = Vocabulary.read(_read_text(cfg, "vocab.tsv"), cfg.get_int("corpus.min_count"))
    return vocab, EmbeddingModel.read(_read_text(cfg, "embedding.txt"), vocab)


def _item_index(cfg: Config, catalog: Catalog) -> ItemContextIndex:
    return ItemContextIndex.read(_read_text(cfg, "item_index.tsv"), catalog.items.as_dict(),
                                 catalog.n_items)


def _model_name(method: str) -> str:
    return f"model_{method}.txt"


def _load_model(cfg: Config, method: str):
    return read_model(_read_text(cfg, _model_name(method), f"train-cf --method {method}"))


# --- subcommands -----------------------------------------------------------

def cmd_ingest(cfg: Config, args) -> None:
    play_log, tags = cfg.get_str("paths.play_log"), cfg.get_str("paths.tags")
    if not play_log or not tags:
        raise ConfigError("ingest needs paths.play_log and paths.tags (or --play-log/--tags)")
    with _open_input(Path(play_log)) as plays, _open_input(Path(tags)) as tag_fh:
        data = load_dataset(plays, tag_fh, cfg.get_int("ingest.gap_seconds"), cfg.get_str("ingest.tag_sep"))
    fraction = cfg.get_float("ingest.train_fraction")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("ingest.train_fraction must lie in (0, 1]")
    train_s, test_s = split_sessions(data.sessions, fraction, stage_seed(cfg.get_int("seed"), "split"))
    ratings = derive_implicit_ratings(session_events(train_s, data.catalog), data.catalog)
    cat = data.catalog
    _write(cfg, "catalog.tsv", lambda fh: write_catalog(cat, fh))
    _write(cfg, "sessions.tsv", lambda fh: write_sessions(data.sessions, cat, fh))
    _write(cfg, "train_sessions.tsv", lambda fh: write_sessions(train_s, cat, fh))
    _write(cfg, "test_sessions.tsv", lambda fh: write_sessions(test_s, cat, fh))
    _write(cfg, "ratings.tsv", lambda fh: write_ratings(ratings, cat, fh))
    _write(cfg, "item_tags.tsv", lambda fh: write_item_tags(data.item_tags, cat, fh))
    digest = dict(data.digest(), train_sessions=len(train_s), test_sessions=len(test_s),
                  skipped_lines=data.skipped_lines)
    _write(cfg, "digest.tsv", lambda fh: fh.writelines(f"{k}\t{v}\n" for k, v in digest.items()))
    print(" ".join(f"{k}={v}" for k, v in digest.items()))


def cmd_corpus(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    train_s = read_sessions(_read_text(cfg, "train_sessions.tsv"), catalog)
    item_tags = read_item_tags(_read_text(cfg, "item_tags.tsv"), catalog)
    vocab, sentences = fit_corpus(item_tags, train_items(train_s), cfg.get_int("corpus.min_count"))
    keys = catalog.items.keys()
    _write(cfg, "vocab.tsv", vocab.write)
    _write(cfg, "sentences.tsv", lambda fh: write_sentences(sentences, keys, fh))
    print(f"vocabulary={len(vocab)} sentences={len(sentences)}")


def cmd_train_embed(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    vocab = Vocabulary.read(_read_text(cfg, "vocab.tsv"), cfg.get_int("corpus.min_count"))
    sentences = read_sentences(_read_text(cfg, "sentences.tsv"), catalog.items.as_dict())
    tc = cfg.train_config()
    model = train(init_model(vocab, tc), sentences, tc)
    _write(cfg, "embedding.txt", model.write)
    _write(cfg, "embed_loss.tsv",
           lambda fh: fh.writelines(f"{e}\t{v!r}\n" for e, v in enumerate(model.loss_trace, 1)))
    final = f"{model.loss_trace[-1]:.6f}" if model.loss_trace else "n/a"
    print(f"tags={len(vocab)} dim={tc.dim} epochs={tc.epochs} final_loss={final}")


def cmd_pca(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    _, model = _embedding(cfg)
    item_tags = read_item_tags(_read_text(cfg, "item_tags.tsv"), catalog)
    pca = fit_pca(model.input_vectors, 1)
    index = item_mean_pca(item_tags, pca, model, catalog.n_items)
    keys = catalog.items.keys()
    _write(cfg, "pca.txt", pca.write)
    _write(cfg, "item_index.tsv", lambda fh: index.write(fh, keys))
    print(f"eigenvalue={pca.eigenvalues[0]:.6g} indexed_items={len(index)} "
          f"coverage={index.coverage:.4f}")


def cmd_train_cf(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    ratings = read_ratings(_read_text(cfg, "ratings.tsv"), catalog)
    methods = cfg.methods() if args.method == "all" else [args.method]
    for method in methods:
        model = train_cf(ratings, method, k=cfg.get_int("cf.knn.k"),
                         similarity=cfg.get_str("cf.knn.similarity"),
                         mf=cfg.mf_config(method) if method != "knn" else MfConfig())
        _write(cfg, _model_name(method), model.write)
        trace = getattr(model, "rmse_trace", None)
        extra = f" train_rmse={trace[-1]:.6f}" if trace else ""
        print(f"method={method}{extra}")


def cmd_recommend(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    if args.user not in catalog.users:
        raise ConfigError(f"unknown user {args.user!r}")
    user = catalog.users.id(args.user)
    model = _load_model(cfg, args.method)
    ratings = read_ratings(_read_text(cfg, "ratings.tsv"), catalog)
    seeds = []
    for key in args.seed_item or []:
        if key not in catalog.items:
            raise ConfigError(f"unknown seed item {key!r}")
        seeds.append(catalog.items.id(key))
    rated = {i for (u, i) in ratings.ratings if u == user}
    m = max(args.n, cfg.get_int("postfilter.candidates"))
    try:
        cands = top_m(model, user, m, rated | set(seeds))
    except ColdUserError:
        raise ConfigError(f"user {args.user!r} has no training ratings") from None
    strategy = args.strategy
    if strategy == "none":
        ranked = unranked(cands)
    else:
        if not seeds:
            raise ConfigError(f"strategy {strategy!r} needs at least one --seed-item")
        item_tags = read_item_tags(_read_text(cfg, "item_tags.tsv"), catalog)
        ctx = _context(cfg, catalog, item_tags, ratings, strategy)
        vals = [ctx.item_index.values[i] for i in seeds if i in ctx.item_index.values]
        if strategy == "pca" and not vals:
            raise ConfigError("no seed item has a context index")
        ref = SessionReference(None, tuple(seeds), sum(vals) / len(vals) if vals else 0.0)
        ranked = rerank(strategy, cands, seeds, ref, ctx, cfg.get_bool("postfilter.drop_unindexed"))
    write_ranked([(args.user, 0, truncate(ranked, args.n))], catalog.items.keys(), sys.stdout)


def _context(cfg: Config, catalog: Catalog, item_tags, ratings, strategy: str | None = None
             ) -> ContextArtifacts:
    """Post-filter inputs; TF-IDF statistics come from the training items only."""
    needs_index = strategy in (None, "pca")
    index = _item_index(cfg, catalog) if needs_index else ItemContextIndex({}, catalog.n_items)
    train_s = read_sessions(_read_text(cfg, "train_sessions.tsv"), catalog)
    tfidf = TfidfIndex({i: item_tags.get(i, []) for i in sorted(train_items(train_s))})
    return ContextArtifacts.build(index, ratings, item_tags, tfidf)


def cmd_evaluate(cfg: Config, args) -> None:
    catalog = _catalog(cfg)
    ecfg = cfg.eval_config()
    models = {m: _load_model(cfg, m) for m in cfg.methods()}
    ratings = read_ratings(_read_text(cfg, "ratings.tsv"), catalog)
    item_tags = read_item_tags(_read_text(cfg, "item_tags.tsv"), catalog)
    test_s = read_sessions(_read_text(cfg, "test_sessions.tsv"), catalog)
    ctx = _context(cfg, catalog, item_tags, ratings)
    report = evaluate_fitted(test_s, models, ctx, ecfg, _digest(cfg))
    _write(cfg, "report.tsv", report.write_tsv)
    print(report.table())


def cmd_plot_data(cfg: Config, args) -> None:
    vocab, model = _embedding(cfg)
    rows = {}
    path = _write(cfg, "scatter.tsv",
                  lambda fh: rows.setdefault("n", emit_scatter(vocab, model,
                                                               cfg.get_int("plot.min_count"), fh)))
    print(f"rows={rows['n']} file={path}")


def cmd_synth(cfg: Config, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg.synthetic_spec(), stage_seed(cfg.get_int("seed"), "synth"))
    (out / "plays.tsv").write_text(data.play_log(), encoding="utf-8")
    (out / "tags.csv").write_text(data.tag_csv, encoding="utf-8")
    print(f"plays={len(data.play_lines)} items={len(data.item_context)} dir={out}")


COMMANDS = {
    "ingest": (cmd_ingest, "parse the play log and tags; sessions, split, ratings"),
    "corpus": (cmd_corpus, "build tag sentences and the vocabulary"),
    "train-embed": (cmd_train_embed, "train tag embeddings"),
    "pca": (cmd_pca, "reduce embeddings to one dimension; per-item context index"),
    "train-cf": (cmd_train_cf, "train collaborative filtering models"),
    "recommend": (cmd_recommend, "top-N list for one user, optionally re-ranked"),
    "evaluate": (cmd_evaluate, "MAP/NDCG for every method x strategy x N cell"),
    "plot-data": (cmd_plot_data, "2-D tag coordinates for a scatter plot"),
    "synth": (cmd_synth, "write a planted-context synthetic dataset"),
}
NEEDS_LOCK = set(COMMANDS) - {"synth"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value settings file")
    common.add_argument("--workdir", help="work directory (paths.workdir)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(
        prog="tagctx", description=__doc__.splitlines()[0],
        epilog="Any configuration key can be overridden with --key=value.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {name: sub.add_parser(name, parents=[common], help=text, description=text)
            for name, (_, text) in COMMANDS.items()}
    subs["ingest"].add_argument("--play-log", help="play log TSV (paths.play_log)")
    subs["ingest"].add_argument("--tags", help="artist tag CSV (paths.tags)")
    subs["train-cf"].add_argument("--method", choices=[*METHODS, "all"], default="all")
    rec = subs["recommend"]
    rec.add_argument("--user", required=True, help="raw user key")
    rec.add_argument("--method", choices=METHODS, default="knn")
    rec.add_argument("--strategy", choices=STRATEGIES, default="none")
    rec.add_argument("--seed-item", action="append", help="raw track key; repeatable")
    rec.add_argument("-n", type=int, default=10, help="list length")
    subs["synth"].add_argument("--out", required=True, help="output directory")
    return parser


def load_config(args, overrides: Sequence[str]) -> Config:
    values = read_config_file(args.config) if args.config else {}
    cfg = Config(values)
    for k, v in parse_overrides(overrides).items():
        cfg.set(k, v)
    if args.workdir:
        cfg.set("paths.workdir", args.workdir)
    for attr, key in (("play_log", "paths.play_log"), ("tags", "paths.tags")):
        if getattr(args, attr, None):
            cfg.set(key, getattr(args, attr))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args, rest)
        if args.command in NEEDS_LOCK:
            cfg.workdir.mkdir(parents=True, exist_ok=True)
            with FileLock(str(cfg.workdir / ".lock"), timeout=0):
                func(cfg, args)
        else:
            func(cfg, args)
    except Timeout:
        print(f"error: work directory {cfg.workdir} is in use by another run", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except TagctxError as exc:
        msg = exc.args[0] if exc.args else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - reported, not raised
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
