import json

import pytest

from tabomlab.cli import run
from tabomlab.config import load_config
from tabomlab.pipeline import Run, read_csv, sha256_file, summarize

TINY = [
    "experiment.seeds=0", "tasks.in_domain=copy", "tasks.ood=sort",
    "model.model_dim=32", "model.ffn_dim=64", "model.heads=2",
    "tasks.pretrain_per_task=300", "tasks.finetune_per_task=48", "tasks.eval_samples=12",
    "tasks.tds_prompts=8", "tasks.tds_samples=8",
    "pretrain.lr=0.004", "pretrain.warmup=10", "pretrain.epochs=10", "pretrain.batch_size=16",
    "finetune.epochs=1", "finetune.batch_size=16",
    "tabom.window=2", "ablate.windows=2,3", "ablate.weights=0.5", "ablate.margins=0.1",
    "ce.ratios=0.25,0.75",
]


def cli(out, *args):
    argv = list(args) + ["--out-dir", str(out)]
    for o in TINY:
        argv += ["--set", o]
    return run(argv)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli(out, "all") == 0
    return out


def test_all_writes_artifacts_and_manifest(full_run):
    d = full_run / "seed0"
    for name in ("base.ckpt", "corpus_sd.jsonl", "corpus_gt.jsonl", "eval.csv", "tds.csv", "tds.svg",
                 "ce_curve.csv", "ce_curve.svg", "ft-tabom.ckpt", "telemetry-tabom.csv"):
        assert (d / name).exists(), name
    man = json.loads((full_run / "manifest.json").read_text())
    assert man["seeds"] == [0] and len(man["config_sha256"]) == 64
    for rel, digest in man["artifacts"].items():
        assert sha256_file(full_run / rel) == digest
    assert "seed0/eval.csv" in man["artifacts"] and "report.md" in man["artifacts"]


def test_report_has_split_columns_and_signed_deltas(full_run):
    md = (full_run / "report.md").read_text()
    header = md.splitlines()[2]
    assert "In-Domain" in header and "OOD" in header
    row = next(line for line in md.splitlines() if line.startswith("| sft-gt"))
    assert "(+" in row or "(-" in row
    assert "No-SFT" in md


def test_eval_rows_cover_models_and_tasks(full_run):
    rows = read_csv(full_run / "seed0" / "eval.csv")
    cfg = load_config(overrides=TINY)
    assert {r["model"] for r in rows} == {"base", *cfg.objectives}
    assert {r["task"] for r in rows} == set(cfg.all_tasks)
    for r in rows:
        assert float(r["rate"]) == int(r["matches"]) / int(r["samples"])


def test_tds_includes_zero_model(full_run):
    rows = read_csv(full_run / "seed0" / "tds_summary.csv")
    assert float(next(r for r in rows if r["model"] == "zero")["tds"]) == 0.0


def test_lambda_zero_checkpoint_equals_traj_mask(full_run):
    assert cli(full_run, "finetune", "--objective", "tabom", "--lambda", "0") == 0
    a = (full_run / "seed0" / "ft-tabom-lambda0.ckpt").read_bytes()
    b = (full_run / "seed0" / "ft-traj-mask.ckpt").read_bytes()
    assert a == b
    (full_run / "seed0" / "ft-tabom-lambda0.ckpt").unlink()
    (full_run / "seed0" / "telemetry-tabom-lambda0.csv").unlink()


def test_ablate_emits_arms_and_sweeps(full_run):
    assert cli(full_run, "ablate") == 0
    rows = read_csv(full_run / "seed0" / "ablate.csv")
    arms = {r["arm"] for r in rows}
    assert {"local+rank", "local", "global+rank", "global"} <= arms
    assert {"window=2", "window=3", "lambda=0.5,gamma=0.1"} <= arms


def test_missing_upstream_names_producer(tmp_path, capsys):
    assert cli(tmp_path, "finetune") == 2
    assert "'pretrain'" in capsys.readouterr().err
    assert cli(tmp_path, "report") == 2
    assert "'eval'" in capsys.readouterr().err


def test_invalid_config_is_field_level(tmp_path, capsys):
    assert run(["eval", "--out-dir", str(tmp_path), "--set", "tabom.window=1"]) == 2
    assert "tabom.window" in capsys.readouterr().err


def test_oracle_subcommand(tmp_path, capsys):
    assert run(["oracle", "--out-dir", str(tmp_path), "--n", "5", "--entropies", "random:3", "--count", "4"]) == 0
    assert "0 lemma failure" in capsys.readouterr().out
    rows = read_csv(tmp_path / "oracle.csv")
    assert len(rows) == 4 and all(r["lemma_ok"] == "True" for r in rows)
    assert run(["oracle", "--out-dir", str(tmp_path), "--entropies", "0.1,0.5,0.2"]) == 0
    assert read_csv(tmp_path / "oracle.csv")[0]["n"] == "3"


def test_standalone_distill(full_run, tmp_path, capsys):
    out = tmp_path / "sd.jsonl"
    assert cli(full_run, "distill", "--model", str(full_run / "seed0" / "base.ckpt"), "--task", "copy",
               "--out", str(out), "--max-new", "8", "--per-step", "2") == 0
    assert "valid" in capsys.readouterr().out
    assert out.exists()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TABOM_OUT", str(tmp_path / "envroot"))
    r = Run(load_config(overrides=TINY))
    assert r.root == tmp_path / "envroot"


def test_summarize_deltas():
    rows = [
        {"model": "base", "task": "a", "rate": "0.5"}, {"model": "base", "task": "b", "rate": "0.4"},
        {"model": "x", "task": "a", "rate": "0.7"}, {"model": "x", "task": "b", "rate": "0.1"},
    ]
    t = summarize(rows, ["a"], ["b"])
    assert t["x"]["d_in"] == pytest.approx(0.2) and t["x"]["d_ood"] == pytest.approx(-0.3)
    assert t["base"]["d_in"] == 0.0
