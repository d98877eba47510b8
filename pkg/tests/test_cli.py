import json
import subprocess
import sys

import pytest

from graph_suite import shrink_records
from migsys.cli import main
from migsys.io import import_model, load_bundle
from migsys.synth import congruence_score


def flows_csv(path, records):
    with open(path, "w") as fh:
        fh.write("origin,destination,period,count\n")
        for r in records:
            fh.write(f"{r.origin},{r.destination},{r.period},{r.count}\n")
    return path


@pytest.fixture
def planted(tmp_path):
    cfg = tmp_path / "plant.json"
    cfg.write_text(json.dumps({"I": 10, "J": 10, "K": 6, "F": 3, "origin_support": 2,
                               "dest_support": 2, "seed": 4}))
    bundle, truth = tmp_path / "x.zip", tmp_path / "truth.json"
    assert main(["synth", str(cfg), "-o", str(bundle), "--truth", str(truth)]) == 0
    return bundle, truth


def test_synth_fit_recovers_truth(planted, tmp_path, capsys):
    bundle, truth = planted
    model = tmp_path / "m.json"
    assert main(["fit", str(bundle), "-o", str(model), "--rank", "3"]) == 0
    est = import_model(model)[0]
    assert congruence_score(import_model(truth)[0], est) >= 0.99
    assert "relative_residual" in capsys.readouterr().out
    man = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 0
    assert str(model) in man["outputs"] and str(bundle) in man["inputs"]


def test_fit_thread_count_does_not_change_output(planted, tmp_path):
    bundle, _ = planted
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["fit", str(bundle), "-o", str(a), "--rank", "3", "--restarts", "3"]) == 0
    assert main(["fit", str(bundle), "-o", str(b), "--rank", "3", "--restarts", "3",
                 "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_replay_reproduces(planted, tmp_path, capsys, monkeypatch):
    bundle, _ = planted
    monkeypatch.chdir(tmp_path)
    assert main(["fit", "x.zip", "-o", "m.json", "--rank", "3", "--restarts", "2"]) == 0
    capsys.readouterr()
    assert main(["replay", "m.json.manifest.json"]) == 0
    assert "same\tm.json" in capsys.readouterr().out


def test_usage_errors(planted, tmp_path, capsys):
    bundle, _ = planted
    out = str(tmp_path / "o.json")
    assert main(["fit", str(bundle), "-o", out, "--rank", "0"]) == 1
    assert main(["fit", str(bundle), "-o", out, "--mask-strategy", "nope"]) == 1
    assert main(["walktrap", str(bundle), "-o", out]) == 1          # --split missing
    assert main([]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"I": 5, "J": 5, "K": 3, "F": 1, "colour": "red"}))
    assert main(["synth", str(bad), "-o", out, "--truth", out]) == 1
    rect = tmp_path / "rect.json"
    rect.write_text(json.dumps({"I": 5, "J": 6, "K": 3, "F": 1}))
    assert main(["synth", str(rect), "-o", out, "--truth", out]) == 1


def test_data_errors(tmp_path, capsys):
    p = tmp_path / "f.csv"
    p.write_text("origin,destination,period,count\nA,B,1,2\nA,C,1,x\n")
    assert main(["ingest", str(p), "-o", str(tmp_path / "b.zip")]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["fit", str(tmp_path / "missing.zip"), "-o", str(tmp_path / "m.json")]) == 2


def test_ingest_bundle_deterministic(tmp_path, capsys):
    p = flows_csv(tmp_path / "f.csv", shrink_records(1))
    a, b = tmp_path / "a.zip", tmp_path / "b.zip"
    assert main(["ingest", str(p), "-o", str(a)]) == 0
    assert main(["ingest", str(p), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    X, _, reg, periods, meta = load_bundle(a)
    assert X.shape == (12, 12, 9) and periods.labels == [str(k) for k in range(1, 10)]
    assert meta["counters"]["records"] == sum(1 for _ in shrink_records(1))
    assert "tensor\t12x12x9" in capsys.readouterr().out


def test_rank_scan_single_rank(planted, tmp_path, capsys):
    bundle, _ = planted
    out = tmp_path / "scan.csv"
    assert main(["rank-scan", str(bundle), "-o", str(out), "--max-rank", "1",
                 "--restarts", "1"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "rank,relative_residual,seed" and len(rows) == 2
    assert "selected_rank\t1" in capsys.readouterr().out


def test_report_and_partition(planted, tmp_path, capsys, caplog):
    bundle, truth = planted
    rep = tmp_path / "rep"
    assert main(["report", str(truth), "-o", str(rep), "--top-k", "50"]) == 0
    assert "clamped to 10" in caplog.text
    assert (rep / "members.csv").exists() and (rep / "manifest.json").exists()
    assert "system 1" in capsys.readouterr().out
    part = tmp_path / "p.csv"
    assert main(["partition", str(truth), "-o", str(part), "--side", "destination"]) == 0
    lines = part.read_text().splitlines()
    assert len(lines) == 11 and lines[1].startswith("n0,")


def test_partition_rank_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"I": 6, "J": 6, "K": 3, "F": 1, "origin_support": 2,
                               "dest_support": 2}))
    truth = tmp_path / "t.json"
    assert main(["synth", str(cfg), "-o", str(tmp_path / "x.zip"), "--truth", str(truth)]) == 0
    part = tmp_path / "p.csv"
    assert main(["partition", str(truth), "-o", str(part)]) == 0
    assert {l.split(",")[1] for l in part.read_text().splitlines()[1:]} == {"1"}


def test_walktrap_command(tmp_path, capsys):
    p = flows_csv(tmp_path / "f.csv", shrink_records(0))
    out = tmp_path / "wt"
    assert main(["walktrap", str(p), "-o", str(out), "--split", "5", "--focal", "n00"]) == 0
    focal = json.loads((out / "focal.json").read_text())
    assert focal["pre_size"] == 8 and focal["post_size"] == 4
    assert (out / "agreement.csv").read_text().startswith("node_id,pre,post\n")
    assert main(["walktrap", str(p), "-o", str(out), "--split", "1"]) == 1


def test_console_script_version():
    r = subprocess.run([sys.executable, "-m", "migsys.cli", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("migsys ")
