from pathlib import Path

import pytest

from tagctx.cli import Config, main, parse_overrides, read_config_file
from tagctx.errors import ConfigError
from tagctx.ingest import format_timestamp

T0 = 1_240_000_000
SMALL = ["--synth.users=6", "--synth.sessions_per_user=8", "--synth.n_contexts=2",
         "--synth.items_per_context=15"]
FAST = {"corpus.min_count": "2", "embed.dim": "8", "embed.epochs": "3",
        "postfilter.candidates": "20", "cf.svd.epochs": "5", "cf.svdpp.epochs": "5",
        "cf.nmf.epochs": "5"}
STAGES = [["corpus"], ["train-embed"], ["pca"], ["train-cf", "--method", "all"], ["evaluate"],
          ["plot-data"]]


def write_config(path: Path, values: dict) -> Path:
    path.write_text("# test settings\n" + "".join(f"{k}={v}\n" for k, v in values.items()))
    return path


def full_run(tmp: Path, name: str, settings: dict = FAST) -> Path:
    data = tmp / "data"
    if not (data / "plays.tsv").exists():
        assert main(["synth", "--out", str(data), *SMALL]) == 0
    work = tmp / name
    cfg = write_config(tmp / f"{name}.conf", dict(settings, **{
        "paths.play_log": data / "plays.tsv", "paths.tags": data / "tags.csv",
        "paths.workdir": work}))
    assert main(["ingest", "--config", str(cfg)]) == 0
    for stage in STAGES:
        assert main([stage[0], "--config", str(cfg), *stage[1:]]) == 0, stage
    return work


def fixture_files(tmp: Path):
    rows = [("alice", T0, "a1", "t1"), ("alice", T0 + 60, "a1", "t2"),
            ("alice", T0 + 5000, "a2", "t3"), ("bob", T0, "a2", "t3"),
            ("bob", T0 + 100, "a1", "t1"), ("carol", T0, "a2", "t4")]
    plays = tmp / "plays.tsv"
    plays.write_text("".join(f"{u}\t{format_timestamp(ts)}\t{a}\tA\t{t}\tT\n" for u, ts, a, t in rows))
    tags = tmp / "tags.csv"
    tags.write_text("artist_mbid,tags\na1,rock;indie\na2,calm\n")
    return plays, tags


def test_ingest_digest(tmp_path, capsys):
    plays, tags = fixture_files(tmp_path)
    rc = main(["ingest", "--play-log", str(plays), "--tags", str(tags), "--workdir",
               str(tmp_path / "w")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "users=3 items=4 events=6 sessions=4" in out
    assert (tmp_path / "w" / "item_tags.tsv").read_text().splitlines()[0] == "t1\trock\tindie"


def test_missing_input_names_path(tmp_path, capsys):
    _, tags = fixture_files(tmp_path)
    missing = tmp_path / "absent.tsv"
    rc = main(["ingest", "--play-log", str(missing), "--tags", str(tags), "--workdir",
               str(tmp_path / "w")])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_ingest_rerun_identical(tmp_path):
    plays, tags = fixture_files(tmp_path)
    args = ["ingest", "--play-log", str(plays), "--tags", str(tags), "--workdir", str(tmp_path / "w")]
    main(args)
    first = {p.name: p.read_bytes() for p in (tmp_path / "w").iterdir()}
    main(args)
    assert {p.name: p.read_bytes() for p in (tmp_path / "w").iterdir()} == first


def test_stage_order_error(tmp_path, capsys):
    plays, tags = fixture_files(tmp_path)
    work = str(tmp_path / "w")
    main(["ingest", "--play-log", str(plays), "--tags", str(tags), "--workdir", work])
    assert main(["evaluate", "--workdir", work]) == 2
    assert "train-cf" in capsys.readouterr().err
    assert main(["train-embed", "--workdir", work]) == 2
    assert "'corpus'" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["corpus", "--workdir", str(tmp_path), "--no.such.key=1"]) == 2
    assert main(["bogus-command"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--synth.fidelity=0.2"]) == 2
    assert main(["corpus", "--workdir", str(tmp_path), "stray"]) == 2


def test_config_parsing(tmp_path):
    path = write_config(tmp_path / "c.conf", {"ingest.gap_seconds": "60", "eval.n_values": "1, 2"})
    cfg = Config(read_config_file(path))
    assert cfg.get_int("ingest.gap_seconds") == 60
    assert cfg.eval_config().n_values == (1, 2)
    assert parse_overrides(["--embed.dim=3"]) == {"embed.dim": "3"}
    with pytest.raises(ConfigError):
        Config({"embed.dim": "three"}).train_config()
    with pytest.raises(ConfigError):
        Config({"embed.shuffle": "maybe"}).get_bool("embed.shuffle")


def test_full_pipeline_grid_and_determinism(tmp_path):
    a = full_run(tmp_path, "run_a")
    b = full_run(tmp_path, "run_b")
    report = (a / "report.tsv").read_text().splitlines()
    assert len(report) == 1 + 48
    cells = {tuple(line.split("\t")[:3]) for line in report[1:]}
    assert len(cells) == 48
    for p in sorted(a.iterdir()):
        if p.name.startswith("."):
            continue
        assert (b / p.name).read_bytes() == p.read_bytes(), p.name


def test_recommend(tmp_path, capsys):
    work = full_run(tmp_path, "run")
    capsys.readouterr()
    assert main(["recommend", "--workdir", str(work), "--user", "user000", "-n", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(l.startswith("user000\t0\t") for l in lines)
    rated = {l.split("\t")[1] for l in (work / "ratings.tsv").read_text().splitlines()
             if l.startswith("user000\t")}
    assert not rated & {l.split("\t")[3] for l in lines}
    assert main(["recommend", "--workdir", str(work), "--user", "user000", "--strategy", "pca"]) == 2
    assert main(["recommend", "--workdir", str(work), "--user", "nobody"]) == 2
