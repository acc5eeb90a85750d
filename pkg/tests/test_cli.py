from __future__ import annotations

import json
import logging

import pytest

from mifc.assembly import DatasetName
from mifc.cli import main
from mifc.core import DataSample, read_jsonl, write_jsonl

from golden_flow import GOLDEN, run_flow_cli

COMMANDS = ["filter", "score", "expand", "genqa", "translate", "judge", "dedup", "leak-check", "assemble",
            "emit-train-config", "report"]


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.delenv("MIFC_API_KEY", raising=False)
    yield
    logging.getLogger().handlers.clear()


def raw(i, text, lang="EN"):
    return DataSample(id=f"r{i}", lang=lang, kind="raw_text", source="t", raw_text=text)


def mc(i, q, prefix="m"):
    return DataSample(id=f"{prefix}{i}", lang="EN", kind="multiple_choice_qa", source="t", question=q,
                      options=(("A", "a"), ("B", "b"), ("C", "c"), ("D", "d")), answer="B")


def test_help_lists_commands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for name in COMMANDS:
        assert name in out


def test_filter_without_input_names_flag(capsys):
    assert main(["filter"]) == 3
    assert "--input" in capsys.readouterr().err


def test_unknown_command_and_flag():
    assert main(["frobnicate"]) == 3
    assert main(["dedup", "--input", "x", "--out", "y", "--bogus"]) == 3


def test_missing_input_file_is_config_error(tmp_path):
    assert main(["dedup", "--input", "nope.jsonl", "--out", "d"]) == 3
    report = json.loads((tmp_path / "d.report.json").read_text())
    assert report["details"]["exit_code"] == 3


def test_filter_writes_outputs_and_report(tmp_path):
    (tmp_path / "kw.txt").write_text("insulin\nglucose\nblood\n", encoding="utf-8")
    write_jsonl(tmp_path / "in.jsonl", [raw(0, "insulin lowers blood glucose"), raw(1, "the weather is mild today")])
    code = main(["filter", "--input", "in.jsonl", "--keywords", "kw.txt", "--thres1", "0.1", "--thres2", "1", "--out", "f"])
    assert code == 0
    assert [s.id for s in read_jsonl(tmp_path / "f.jsonl")] == ["r0"]
    assert [s.id for s in read_jsonl(tmp_path / "f.rejected.jsonl")] == ["r1"]
    report = json.loads((tmp_path / "f.report.json").read_text())
    assert report["command"] == "filter" and report["counts"]["kept"] == 1
    assert report["inputs"][0]["path"] == "in.jsonl" and len(report["inputs"][0]["sha256"]) == 64
    assert report["config_digest"]


def test_filter_without_keywords_is_config_error():
    write_jsonl("in.jsonl", [raw(0, "text")])
    assert main(["filter", "--input", "in.jsonl", "--out", "f"]) == 3


def test_score_identity(tmp_path, capsys):
    (tmp_path / "a.txt").write_text("insulin lowers glucose\nfever and cough\n", encoding="utf-8")
    assert main(["score", "--metric", "ccts", "--a", "a.txt", "--b", "a.txt", "--config", str(GOLDEN / "config.json")]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["line"] for r in rows] == [1, 2]
    assert all(abs(r["score"] - 1.0) < 1e-9 for r in rows)
    assert (tmp_path / "mifc-score.report.json").exists()


def test_score_length_mismatch(tmp_path):
    (tmp_path / "a.txt").write_text("one\ntwo\n", encoding="utf-8")
    (tmp_path / "b.txt").write_text("one\n", encoding="utf-8")
    assert main(["score", "--metric", "bleu", "--a", "a.txt", "--b", "b.txt"]) == 1


def test_dedup_command(tmp_path):
    write_jsonl("a.jsonl", [raw(0, "insulin lowers glucose"), raw(1, "Insulin  lowers glucose")])
    write_jsonl("b.jsonl", [raw(2, "an unrelated sentence entirely")])
    assert main(["dedup", "--input", "a.jsonl", "--input", "b.jsonl", "--out", "d"]) == 0
    assert [s.id for s in read_jsonl(tmp_path / "d.jsonl")] == ["r0", "r2"]
    dropped = read_jsonl(tmp_path / "d.rejected.jsonl")
    assert dropped[0].annotations["dedup.kept_id"] == "r0"
    assert json.loads((tmp_path / "d.report.json").read_text())["counts"]["exact_dups_removed"] == 1


def test_leak_check_command(tmp_path):
    write_jsonl("ift.jsonl", [raw(i, f"medical text number {i} about kidneys") for i in range(5)])
    write_jsonl("train.jsonl", [mc(0, "Which organ filters blood?", "t")])
    write_jsonl("test.jsonl", [mc(0, "Which hormone lowers glucose?", "s")])
    args = ["leak-check", "--ift", "ift.jsonl", "--mc-train", "train.jsonl", "--mc-test", "test.jsonl", "--probes", "3", "--seed", "7"]
    assert main(args + ["--out", "leak.json"]) == 0
    first = json.loads((tmp_path / "leak.json").read_text())
    assert first["passed"] and len(first["probes"]["EN"]) == 3
    assert main(args + ["--out", "leak2.json"]) == 0
    assert json.loads((tmp_path / "leak2.json").read_text()) == first

    write_jsonl("ift.jsonl", [mc(9, "Which hormone lowers glucose?", "x")])
    assert main(args + ["--out", "leak3.json"]) == 1
    collisions = json.loads((tmp_path / "leak3.json").read_text())["collisions"]
    assert collisions == [{"probe_id": "x9", "colliding_set": "mc_test", "colliding_id": "s0", "match": "exact"}]


def test_transport_failure_exits_2(tmp_path):
    # An empty replay file answers nothing, so every call is a transport failure.
    (tmp_path / "empty.jsonl").write_text("", encoding="utf-8")
    write_jsonl("in.jsonl", [raw(0, "insulin text")])
    assert main(["genqa", "--replay", "empty.jsonl", "--input", "in.jsonl", "--out", "g"]) == 2
    rejected = read_jsonl(tmp_path / "g.rejected.jsonl")
    assert rejected[0].annotations["gen.reject_reason"] == "transport"
    assert json.loads((tmp_path / "g.report.json").read_text())["details"]["exit_code"] == 2


def test_live_provider_without_key_is_config_error():
    write_jsonl("in.jsonl", [raw(0, "insulin text")])
    assert main(["genqa", "--input", "in.jsonl", "--out", "g"]) == 3


def test_bad_jobs_is_config_error():
    write_jsonl("in.jsonl", [raw(0, "x")])
    assert main(["dedup", "--jobs", "0", "--input", "in.jsonl", "--out", "d"]) == 3


def test_json_logs(tmp_path, capsys):
    assert main(["dedup", "--log-format", "json", "--input", "missing.jsonl", "--out", "d"]) == 3
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    assert lines
    for line in lines:
        payload = json.loads(line)
        assert {"ts", "level", "logger", "msg"} <= payload.keys()


def test_golden_smoke_run(tmp_path, capsys):
    result, codes = run_flow_cli(GOLDEN, tmp_path / "work")
    assert codes == [0, 0, 0, 0]
    for name in DatasetName:
        produced = (result.out_dir / f"{name.value}.manifest.json").read_bytes()
        assert produced == (GOLDEN / f"golden_{name.value}.manifest.json").read_bytes()
    ift = json.loads((result.out_dir / "mmed_ift.manifest.json").read_text())
    assert ift["per_language_counts"] == {"EN": 6, "KO": 5}
    for stem in ("filtered", "genqa", "translate"):
        assert (result.work / f"{stem}.report.json").exists()
    assert (result.out_dir / "assemble.report.json").exists()
    assert "mmed_ift" in capsys.readouterr().out

    manifests = [str(result.out_dir / f"{n.value}.manifest.json") for n in DatasetName]
    assert main(["report", *sum((["--manifest", m] for m in manifests), []), "--out", "r.json"]) == 0
    assert main(["emit-train-config", "--out", "configs", *sum((["--manifest", m] for m in manifests), [])]) == 0
    stage1 = json.loads((tmp_path / "configs" / "stage1_knowledge.json").read_text())
    assert stage1["rank"] == 32 and stage1["merge_adapter_after"] is True
    assert main(["emit-train-config", "--out", "c2", "--manifest", manifests[0]]) == 1
