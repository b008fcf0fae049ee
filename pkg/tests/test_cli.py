import csv
import json

import pytest

from conftest import PAPER_POOL
from qshare.cli import main

SMALL = {"n_qsps": 10, "difficulty": 4, "seed": 5}
ALL_ATTACKS = [{"kind": k} for k in ("eavesdrop", "premature_access", "block_tamper",
                                     "forged_sender", "compromise_qsp")]


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def test_select_worked_example(tmp_path, capsys):
    pool = write(tmp_path, "pool.json", list(PAPER_POOL))
    assert main(["select", "--pool", str(pool), "--tau", "1515552555821", "--qfn", "50"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["selected_index"] == 21
    assert (out["p_l"], out["p_sl"]) == (24066347, 179424793)


def test_select_object_pool_and_single(tmp_path, capsys):
    pool = write(tmp_path, "pool.json", {"primes": list(PAPER_POOL)})
    assert main(["select", "--pool", str(pool), "--tau", "123", "--qfn", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["selected_index"] == 0


@pytest.mark.parametrize("pool", [[1, 2, 3], list(PAPER_POOL[:9]) + [4], "nonsense"])
def test_select_bad_pool(tmp_path, pool):
    p = write(tmp_path, "pool.json", pool)
    assert main(["select", "--pool", str(p), "--tau", "1", "--qfn", "5"]) == 2


def test_select_bad_qfn(tmp_path):
    p = write(tmp_path, "pool.json", list(PAPER_POOL))
    assert main(["select", "--pool", str(p), "--tau", "1", "--qfn", "0"]) == 2


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


@pytest.mark.parametrize("cfg", [{"n_qsps": 0}, {"bogus": 1}, {"attacks": [{"kind": "ddos"}]},
                                 {"notify_time": 2000, "unlock_time": 1000}])
def test_run_bad_config(tmp_path, cfg, capsys):
    assert main(["run", "--config", str(write(tmp_path, "c.json", cfg))]) == 2
    assert "config error" in capsys.readouterr().err


def test_run_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_run_baseline(tmp_path, capsys):
    cfg = write(tmp_path, "c.json", SMALL)
    assert main(["run", "--config", str(cfg), "--report", str(tmp_path / "r.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "r.json").read_text())
    assert printed["ok"] and all(printed["checks"].values())


def test_run_failed_check_exits_1(tmp_path):
    # setup cannot finish before notification at tick 0
    cfg = write(tmp_path, "c.json", dict(SMALL, notify_time=0, unlock_time=10))
    assert main(["run", "--config", str(cfg)]) == 1


def test_run_is_deterministic(tmp_path):
    cfg = write(tmp_path, "c.json", dict(SMALL, attacks=ALL_ATTACKS))
    main(["run", "--config", str(cfg), "--report", str(tmp_path / "a.json")])
    main(["run", "--config", str(cfg), "--report", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_run_writes_artifacts(tmp_path):
    cfg = write(tmp_path, "c.json", dict(SMALL, attacks=ALL_ATTACKS))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("report.json", "minions.csv", "transcript.jsonl", "selection_reach.png", "traffic.png"):
        assert (out / name).stat().st_size > 0, name
    assert (out / "selection_reach.png").read_bytes()[:4] == b"\x89PNG"
    rows = list(csv.DictReader((out / "minions.csv").open()))
    assert [r["minion_id"] for r in rows] == ["minion-0", "minion-1", "minion-2"]
    assert set(rows[0]) == {"minion_id", "status", "master_view", "outcome", "reason", "qsp_digest"}
    assert sorted(p.name for p in out.glob("audit-*.jsonl")) == [f"audit-minion-{i}.jsonl" for i in range(3)]
    for line in (out / "transcript.jsonl").read_text().splitlines():
        json.loads(line)


def test_run_no_figures(tmp_path):
    cfg = write(tmp_path, "c.json", SMALL)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    assert not list(out.glob("*.png"))
