import json

import numpy as np
import pytest

from calm import cli
from calm import ssmnet as sm


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write(path, text):
    path.write_text(text)
    return path


# ingestion

def test_mean_imputation(tmp_path):
    p = write(tmp_path / "a.csv", "x,y\n1.5,a\n,b\n4.5,a\n3.0,NA\n")
    table, report = cli.ingest(p)
    assert table.column("x")[1] == pytest.approx(3.0)
    assert table.is_discrete("y") and table.info("y").categories == ("a", "b")
    assert table.column("y")[3] == 0  # mode
    assert report["columns"]["x"] == {"type": "continuous", "missing": 1, "impute": "mean", "imputed": 1}


def test_knn_imputation_on_complete_columns(tmp_path):
    rows = ["z,w,t"] + [f"{z},{w},{t}" for z, w, t in
                        [(0.0, 10.2, 1.0), (0.1, 11.2, 1.1), (5.0, 50.2, 9.0), (5.2, 52.2, 9.5), (0.05, "", "")]]
    p = write(tmp_path / "k.csv", "\n".join(rows) + "\n")
    table, _ = cli.ingest(p, schema={"impute": "knn", "k": 2})
    # t is incomplete, so only z defines the metric; the two nearest rows have w 10.2, 11.2
    assert table.column("w")[4] == pytest.approx(10.7)
    assert table.column("t")[4] == pytest.approx(1.05)


def test_schema_overrides_auto_detection(tmp_path):
    p = write(tmp_path / "b.csv", "flag,v\n0,1.2\n1,2.2\n1,0.3\n0,4.1\n")
    auto, _ = cli.ingest(p)
    assert auto.is_discrete("flag")
    forced, report = cli.ingest(p, schema={"columns": {"flag": {"type": "continuous"}}})
    assert not forced.is_discrete("flag") and report["columns"]["flag"]["type"] == "continuous"
    assert np.array_equal(forced.column("flag"), [0, 1, 1, 0])


def test_ingest_errors(tmp_path):
    with pytest.raises(cli.DataError):
        cli.ingest(write(tmp_path / "c.csv", "a,b\n1,\n2,\n"))
    with pytest.raises(cli.DataError):
        cli.ingest(write(tmp_path / "d.csv", "a\n1\nx\n"), schema={"columns": {"a": {"type": "continuous"}}})
    with pytest.raises(cli.DataError):
        cli.ingest(write(tmp_path / "e.csv", "a,b\n1,2\n3\n"))
    with pytest.raises(cli.DataError):
        cli.ingest(write(tmp_path / "f.csv", "a\n1\n2\n"), schema={"columns": {"q": {}}})


def test_quoted_cells(tmp_path):
    table, _ = cli.ingest(write(tmp_path / "q.csv", 'name,v\n"a, b",1.5\n"c ""d""",2.5\n"a, b",0.5\n'))
    assert table.info("name").categories == ("a, b", 'c "d"')


def test_mixed_type_clinical_shape(tmp_path):
    rng = np.random.default_rng(0)
    n = 615
    cols = {"Category": rng.choice(["0=Blood Donor", "1=Hepatitis", "2=Fibrosis", "3=Cirrhosis"], n),
            "Age": rng.integers(19, 78, n), "Sex": rng.choice(["m", "f"], n)}
    for name in ["ALB", "ALP", "ALT", "AST", "BIL", "CHE", "CHOL", "CREA", "GGT", "PROT"]:
        cols[name] = np.round(rng.lognormal(3, 0.4, n), 1).astype(object)
        cols[name][rng.choice(n, 5, replace=False)] = "NA"
    header = list(cols)
    lines = [",".join(header)] + [",".join(str(cols[h][i]) for h in header) for i in range(n)]
    table, report = cli.ingest(write(tmp_path / "hcv.csv", "\n".join(lines) + "\n"))
    assert table.n_rows == 615 and table.n_cols == 13
    assert table.is_discrete("Category") and table.is_discrete("Sex") and not table.is_discrete("Age")
    assert np.isfinite(table.values).all()
    assert sum(c["imputed"] for c in report["columns"].values() if "imputed" in c) == 50


# configuration

def test_config_precedence(tmp_path):
    conf = write(tmp_path / "c.json", json.dumps({"seed": 5, "train": {"epochs": 7, "lr": 0.01}}))
    args = cli.build_parser().parse_args(["train", "--data", "x", "--out", "y", "--config", str(conf),
                                          "--lr", "0.5"])
    cfg = cli.resolve(args, "train")
    assert cfg["lr"] == 0.5 and cfg["epochs"] == 7 and cfg["seed"] == 5 and cfg["patience"] == 10


def test_threads_resolution(monkeypatch):
    monkeypatch.setenv("CALM_THREADS", "3")
    assert cli._threads({}) == 3
    assert cli._threads({"threads": 2}) == 2
    assert cli._threads({"threads": 2, "deterministic": True}) == 1


def test_pairs_argument():
    assert cli._pairs_arg("a:b, c:d") == [("a", "b"), ("c", "d")]
    with pytest.raises(cli.UsageError):
        cli._pairs_arg("a-b")


# subcommands

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for seed in (1, 2):
        assert cli.main(["simulate", "--family", "suite", "--vars", "6", "--edges", "6", "--rows", "200",
                         "--seed", str(seed), "--out", str(d / f"d{seed}")]) == 0
    assert cli.main(["collect", "--data", str(d / "d1.csv"), "--truth", str(d / "d1.json"),
                     "--data", str(d / "d2.csv"), "--truth", str(d / "d2.json"), "--seed", "0",
                     "--deterministic", "--out", str(d / "scores.csv")]) == 0
    train = ["train", "--data", str(d / "scores.csv"), "--epochs", "4", "--d", "8", "--layers", "1",
             "--delta", "8", "--seed", "1", "--deterministic"]
    assert cli.main(train + ["--out", str(d / "m.calm"), "--log", str(d / "log.jsonl")]) == 0
    assert cli.main(train + ["--out", str(d / "m2.calm")]) == 0
    return d


def test_simulate_writes_dataset_and_truth(workspace, capsys):
    code, out, _ = run(capsys, "simulate", "--family", "nonlinear", "--vars", "20", "--rows", "500",
                       "--seed", "7", "--out", workspace / "nl")
    assert code == 0
    truth = json.loads((workspace / "nl.json").read_text())
    assert len(truth["truth"]["variables"]) == 20
    assert (workspace / "nl.csv").read_text().count("\n") == 501
    run(capsys, "simulate", "--family", "nonlinear", "--vars", "20", "--rows", "500",
        "--seed", "7", "--out", workspace / "nl2")
    assert (workspace / "nl.csv").read_bytes() == (workspace / "nl2.csv").read_bytes()


def test_collect_produces_balanced_versioned_matrix(workspace):
    from calm import featurize as fz

    mat = fz.ScoreMatrix.load(workspace / "scores.csv")
    labels = [r.label for r in mat.records]
    assert labels.count(1) == labels.count(0) > 0
    assert (workspace / "scores.csv").read_text().startswith("# " + fz.SCHEMA_VERSION)


def test_train_same_seed_identical_bytes(workspace):
    assert (workspace / "m.calm").read_bytes() == (workspace / "m2.calm").read_bytes()
    lines = (workspace / "log.jsonl").read_text().splitlines()
    assert len(lines) >= 1 and "epoch" in json.loads(lines[0])


def test_inspect(workspace, capsys):
    code, out, _ = run(capsys, "inspect", workspace / "m.calm")
    assert code == 0 and json.loads(out)["config"]["d"] == 8


def test_discover_target_dot_and_export(workspace, capsys):
    code, _, _ = run(capsys, "discover", "--data", workspace / "d1.csv", "--model", workspace / "m.calm",
                     "--target", "X4", "--deterministic", "--out", workspace / "g.dot")
    assert code == 0
    dot = (workspace / "g.dot").read_text()
    assert dot.startswith("digraph calm {")
    edges = [ln for ln in dot.splitlines() if "->" in ln]
    assert all('"X4"' in ln for ln in edges)
    code, _, _ = run(capsys, "discover", "--data", workspace / "d1.csv", "--model", workspace / "m.calm",
                     "--deterministic", "--out", workspace / "g.json")
    assert code == 0
    code, _, _ = run(capsys, "export-dot", "--result", workspace / "g.json", "--out", workspace / "g2.dot")
    assert code == 0 and (workspace / "g2.dot").read_text().startswith("digraph calm {")


def test_discover_reproducible(workspace, capsys):
    for name in ("r1.json", "r2.json"):
        run(capsys, "discover", "--data", workspace / "d2.csv", "--model", workspace / "m.calm",
            "--seed", "3", "--deterministic", "--out", workspace / name)
    assert (workspace / "r1.json").read_bytes() == (workspace / "r2.json").read_bytes()


def test_infer_pairs(workspace, capsys):
    code, out, _ = run(capsys, "infer", "--data", workspace / "d1.csv", "--model", workspace / "m.calm",
                       "--pairs", "X1:X4,X2:X3", "--alpha", "0.999", "--deterministic",
                       "--out", workspace / "i.json")
    assert code == 0
    res = json.loads((workspace / "i.json").read_text())
    assert {(e["cause"], e["effect"]) for e in res["classified"]} <= {("X1", "X4"), ("X2", "X3")}


def test_benchmark_pc_only(workspace, capsys):
    code, out, _ = run(capsys, "benchmark", "--datasets", "2", "--vars", "6", "--edges", "6", "--rows", "200",
                       "--methods", "pc", "--out", workspace / "b.json")
    assert code == 0 and out.startswith("method")
    rep = json.loads((workspace / "b.json").read_text())
    assert rep["aggregate"]["pc"]["n"] == 2


def test_exit_codes_and_error_json(workspace, capsys):
    code, _, err = run(capsys, "train")
    assert code == cli.EXIT_USAGE and json.loads(err)["exit_code"] == 2
    code, _, err = run(capsys, "discover", "--data", workspace / "missing.csv", "--model",
                       workspace / "m.calm", "--out", workspace / "x.json")
    assert code == cli.EXIT_DATA and json.loads(err)["error"]
    code, _, err = run(capsys, "discover", "--data", workspace / "d1.csv", "--model",
                       workspace / "d1.csv", "--out", workspace / "x.json")
    assert code == cli.EXIT_DATA and json.loads(err)["error"] == "CheckpointError"
    code, _, _ = run(capsys, "discover", "--data", workspace / "d1.csv", "--model", workspace / "m.calm",
                     "--out", workspace / "x.png")
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "nonsense")
    assert code == cli.EXIT_USAGE


def test_score_schema_mismatch_fails_loudly(workspace, capsys):
    bad = workspace / "old.csv"
    bad.write_text((workspace / "scores.csv").read_text().replace("calm-scores/1", "calm-scores/0", 1))
    code, _, err = run(capsys, "train", "--data", bad, "--epochs", "1", "--out", workspace / "o.calm")
    assert code == cli.EXIT_DATA


def test_checkpoint_loads_after_cli_train(workspace):
    ck = sm.load(workspace / "m.calm")
    assert ck.config.d == 8 and ck.config.seed == 1
