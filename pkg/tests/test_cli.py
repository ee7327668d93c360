import csv
import json

import pytest

from mqproxy import bench, cli, dsl


@pytest.fixture(scope="module")
def mlp_bench_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "b.json"
    assert cli.main(["bench", "build", "--net", "mlp-s", "--configs", "40", "--out", str(out), "--seed", "0"]) == 0
    return out


def read_csv(path):
    return list(csv.DictReader(path.open(encoding="utf-8")))


def test_bench_build_outputs(mlp_bench_file):
    b = bench.load(mlp_bench_file)
    assert len(b) == 40 and b.net_spec == "mlp-s"
    manifest = json.loads(mlp_bench_file.with_suffix(".manifest.json").read_text())
    assert manifest["command"] == "bench build" and "config_hash" in manifest


def test_bench_query(mlp_bench_file, capsys):
    assert cli.main(["bench", "query", "--bench", str(mlp_bench_file), "--idx", "3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    cfg = ",".join(map(str, doc["bit_cfg"]))
    assert cli.main(["bench", "query", "--bench", str(mlp_bench_file), "--cfg", cfg]) == 0
    assert json.loads(capsys.readouterr().out) == doc
    assert cli.main(["bench", "query", "--bench", str(mlp_bench_file), "--idx", "999"]) == 1


def test_missing_bench_exits_1(tmp_path):
    assert cli.main(["bench", "query", "--bench", str(tmp_path / "none.json"), "--idx", "0"]) == 1


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["evolve"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["bench", "build", "--out", "x", "--palette", "2,a"])
    assert exc.value.code == 2


def test_eval_outputs(mlp_bench_file, tmp_path):
    emq = tmp_path / "emq.json"
    emq.write_text(dsl.dumps(dsl.emq_genome()))
    out = tmp_path / "eval"
    args = ["eval", "--bench", str(mlp_bench_file), "--proxy", "bparams", "--proxy", str(emq),
            "--proxy", "oracle", "--runs", "2", "--n-cfgs", "10", "--out-dir", str(out)]
    assert cli.main(args) == 0
    rows = read_csv(out / "summary.csv")
    assert [r["proxy"] for r in rows] == ["bparams", "emq", "oracle"]
    assert float(rows[2]["rho_s@100_mean"]) == 1.0
    assert len(read_csv(out / "eval.csv")) == 6
    first = (out / "eval.csv").read_bytes()
    assert cli.main(args) == 0
    assert (out / "eval.csv").read_bytes() == first


def test_eval_unknown_proxy_exits_1(mlp_bench_file, tmp_path):
    assert cli.main(["eval", "--bench", str(mlp_bench_file), "--proxy", "nonsense",
                     "--out-dir", str(tmp_path)]) == 1


def test_evolve_outputs(mlp_bench_file, tmp_path):
    out = tmp_path / "evo"
    assert cli.main(["evolve", "--bench", str(mlp_bench_file), "--iterations", "10", "--population", "6",
                     "--n-eval-cfgs", "20", "--out-dir", str(out), "--seed", "1"]) == 0
    g = dsl.loads((out / "best.json").read_text())
    assert g.structure == "branched"
    hist = read_csv(out / "history.csv")
    assert list(hist[0]) == list(cli.search.HISTORY_FIELDS)
    assert json.loads((out / "manifest.json").read_text())["seeds"]["seed"] == 1


def test_seed_env_fallback(mlp_bench_file, tmp_path, monkeypatch):
    monkeypatch.setenv("EMQ_SEED", "7")
    out = tmp_path / "evo"
    assert cli.main(["evolve", "--bench", str(mlp_bench_file), "--iterations", "2", "--population", "4",
                     "--n-eval-cfgs", "20", "--out-dir", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seeds"]["seed"] == 7


def test_assign_and_sweep(mlp_bench_file, tmp_path):
    out = tmp_path / "assign"
    assert cli.main(["assign", "--bench", str(mlp_bench_file), "--proxy", "bparams", "--budget-mb", "0.002",
                     "--sweep", "4", "--out-dir", str(out)]) == 0
    res = json.loads((out / "assign.json").read_text())
    assert res["model_size_mb"] <= 0.002
    sizes = [float(r["model_size_mb"]) for r in read_csv(out / "pareto.csv")]
    assert sizes == sorted(set(sizes))


def test_assign_infeasible_budget_exits_1(mlp_bench_file, tmp_path):
    assert cli.main(["assign", "--bench", str(mlp_bench_file), "--proxy", "bparams", "--budget-mb", "1e-6",
                     "--out-dir", str(tmp_path)]) == 1


def test_report_idempotent(mlp_bench_file, tmp_path):
    ev = tmp_path / "eval"
    cli.main(["eval", "--bench", str(mlp_bench_file), "--proxy", "snip", "--runs", "1", "--n-cfgs", "10",
              "--out-dir", str(ev)])
    rep = tmp_path / "rep"
    assert cli.main(["report", "--inputs", str(ev), "--out-dir", str(rep)]) == 0
    first = (rep / "report.md").read_bytes()
    assert cli.main(["report", "--inputs", str(ev), "--out-dir", str(rep)]) == 0
    assert (rep / "report.md").read_bytes() == first
    assert cli.main(["report", "--inputs", str(tmp_path / "missing"), "--out-dir", str(rep)]) == 1
