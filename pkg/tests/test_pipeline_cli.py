import json
from pathlib import Path

import pytest

from conftest import REPOS, table_records
from repoctx.cli import main
from repoctx.evaluation import append_records
from repoctx.pipeline import ConfigError, RunConfig, run_experiment, token_counts

FIXTURES = REPOS.parent
DATASET = FIXTURES / "dataset3"
REPLAY = FIXTURES / "replay" / "dataset3-gpt-3.5-turbo.jsonl"


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        ({"strategy": "FewShot"}, "strategy"),
        ({"method": "bm25"}, "unknown method"),
        ({"ablation": ["nope"]}, "ablation"),
        ({"ablation": ["callers_of_ef"], "method": "preliminary"}, "only applies"),
        ({"ablation": ["summarize"]}, "enrichment"),
        ({"budget": 5000}, "budget"),
        ({"backend": "nope"}, "unknown backend"),
    ],
)
def test_config_rejected_before_io(tmp_path, kwargs, msg):
    cfg = RunConfig(dataset=str(tmp_path / "missing"), out=str(tmp_path / "runs"), **kwargs)
    with pytest.raises(ConfigError, match=msg):
        run_experiment(cfg)
    assert not (tmp_path / "runs").exists()


def _run(tmp_path, **kw):
    cfg = RunConfig(dataset=str(DATASET), replay=str(REPLAY), out=str(tmp_path), **kw)
    return run_experiment(cfg)


def test_offline_run_layout(tmp_path):
    run_dir = _run(tmp_path)
    ids = sorted(json.loads(l)["sample_id"] for l in (DATASET / "manifest.jsonl").read_text().splitlines())
    for sid in ids:
        for rel in (f"bundles/{sid}.json", f"prompts/{sid}.txt", f"prompts/{sid}.json", f"exchanges/{sid}.json"):
            assert (run_dir / rel).is_file(), rel
    run = json.loads((run_dir / "run.json").read_text())
    assert [s["status"] for s in run["samples"]] == ["ok"] * 3
    rows = [json.loads(l) for l in (run_dir / "report" / "grading.jsonl").read_text().splitlines()]
    assert [r["advisory"]["correct_repair"] for r in rows] == [1, 1, 1]
    assert set(token_counts(run_dir)) >= set(ids)


def test_preliminary_prompts_have_no_repository_context(tmp_path):
    run_dir = _run(tmp_path, method="preliminary")
    sidecars = list((run_dir / "prompts").glob("*.json"))
    assert len(sidecars) == 3
    for meta in sidecars:
        assert json.loads(meta.read_text())["sections"] == ["instruction", "example", "error_function"]


def test_rlce_prompts_have_repository_context(tmp_path):
    run_dir = _run(tmp_path)
    for meta in (run_dir / "prompts").glob("*.json"):
        assert "context" in json.loads(meta.read_text())["sections"]


def test_replay_miss_is_isolated(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = RunConfig(dataset=str(DATASET), replay=str(empty), out=str(tmp_path / "r"))
    run = json.loads((run_experiment(cfg) / "run.json").read_text())
    assert [s["status"] for s in run["samples"]] == ["failed"] * 3


def test_cli_tree(capsys):
    code, out, _ = cli(capsys, "tree", REPOS / "fix1")
    assert code == 0
    tree = json.loads(out)
    assert json.dumps(tree).count("utils.py") >= 1


def test_cli_retrieve_has_four_sources(capsys):
    code, out, _ = cli(capsys, "retrieve", REPOS / "fix1", "utils.py:2")
    assert code == 0
    bundle = json.loads(out)
    for key in ("definitions_of_eif", "callers_of_ef", "callers_of_eif", "similar_segments"):
        assert isinstance(bundle[key], list)
    assert bundle["callers_of_eif"] or bundle["callers_of_ef"]


def test_cli_report_length_bins(tmp_path, capsys):
    recs = table_records()
    path = tmp_path / "g.jsonl"
    append_records(path, recs)
    tokens = tmp_path / "t.json"
    tokens.write_text(json.dumps({r.sample_id: i for i, r in enumerate(recs)}))
    code, out, _ = cli(capsys, "report", path, "--by", "length", "--bins", 4, "--tokens", tokens, "--format", "json")
    assert code == 0
    rows = json.loads(out)["data"]
    assert [r["n"] for r in rows] == [31, 31, 31, 31]
    assert [r["correct_repair"] for r in rows] == [28, 0, 0, 0]


def test_cli_report_metrics_text(tmp_path, capsys):
    path = tmp_path / "g.jsonl"
    append_records(path, table_records())
    code, out, _ = cli(capsys, "report", path)
    assert code == 0 and "0.2258" in out and "0.5968" in out and "0.8145" in out


def test_cli_grade_init_and_check(tmp_path, capsys):
    run_dir = _run(tmp_path / "runs")
    code, out, _ = cli(capsys, "grade", "init", "--exchanges", run_dir, "--manifest", DATASET / "manifest.jsonl",
                       "--grader", "alice")
    assert code == 0
    rows = [json.loads(l) for l in out.splitlines()]
    assert len(rows) == 3 and all(r["grader"] == "alice" and r["correct_repair"] is None for r in rows)
    graded = tmp_path / "g.jsonl"
    graded.write_text("".join(
        json.dumps({k: v for k, v in r.items() if k != "advisory"}
                   | {"related_reply": 1, "correct_format": 1, "correct_repair": 1}) + "\n" for r in rows))
    code, out, _ = cli(capsys, "grade", "check", "--records", graded)
    assert code == 0 and json.loads(out)["final"] == 3


def test_cli_config_file_supplies_defaults(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(f"[repoctx]\nstrategy = one-shot\nwindow = 5\n[run]\nreplay = {REPLAY}\nout = {tmp_path / 'runs'}\n")
    code, out, err = cli(capsys, "--config", ini, "run", "--manifest", DATASET)
    assert code == 0, err
    result = json.loads(out)
    assert Path(result["run_dir"]).parent == tmp_path / "runs"
    assert "-OneShot-" in Path(result["run_dir"]).name
    assert result["status"]["ok"] == 3


def test_cli_errors_are_json_on_stderr(capsys, tmp_path):
    code, out, err = cli(capsys, "run", "--manifest", DATASET, "--strategy", "FewShot", "--out", tmp_path)
    assert code == 2 and out == ""
    assert json.loads(err)["error"] == "ConfigError"
    assert not any(tmp_path.iterdir())
    code, _, err = cli(capsys, "retrieve", REPOS / "fix1", "utils.py:999")
    assert code == 2 and "message" in json.loads(err)
    code, _, err = cli(capsys, "bogus")
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_cli_inject(tmp_path, capsys):
    code, out, _ = cli(capsys, "inject", REPOS / "fix1", "--out", tmp_path / "ds", "--rules", "op,np")
    res = json.loads(out)
    assert code == 0 and res["invalid"] == {} and res["samples"] > 0
    assert set(res["by_rule"]) == {"OP", "NP"}
