import json

import numpy as np
import pytest

from tabomlab.decoding import DecodeEvent, DecodeSchedule, Trajectory
from tabomlab.model import DenoiserConfig, init_params
from tabomlab.tasks import default_vocab, generate_corpus, get_task
from tabomlab.trajectories import (CorpusError, DistillConfig, distill, load_corpus, pairs_to_trajectories,
                                   save_corpus)

VOCAB = default_vocab()


@pytest.fixture(scope="module")
def base():
    return init_params(DenoiserConfig(layers=1, heads=2, model_dim=16, ffn_dim=16, seed=1, init_std=0.3), VOCAB)


def _traj(entropy=0.123456789012345678):
    ev = [DecodeEvent(1, 4, 2, entropy, 0), DecodeEvent(0, 3, 1, 0.1 + 0.2, 0)]
    return Trajectory((14, 3, 4), (3, 4), ev, "gen-abc", True, "copy")


def test_round_trip_exact(tmp_path):
    t = _traj(np.nextafter(0.5, 1.0))
    save_corpus([t], tmp_path / "c.jsonl")
    (back,) = load_corpus(tmp_path / "c.jsonl")
    assert back == t
    assert back.events[0].entropy.hex() == t.events[0].entropy.hex()


def test_empty_file_is_empty_corpus(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_corpus(tmp_path / "e.jsonl") == []


def test_truncated_last_line_reports_line_and_keeps_prior(tmp_path):
    p = tmp_path / "c.jsonl"
    save_corpus([_traj(), _traj(0.2)], p)
    text = p.read_text()
    p.write_text(text[:-20])
    with pytest.raises(CorpusError) as err:
        load_corpus(p)
    assert err.value.line == 2
    assert "c.jsonl:2" in str(err.value)
    assert len(err.value.records) == 1 and err.value.records[0] == _traj()


def test_missing_field_named(tmp_path):
    rec = json.loads(json.dumps({"task_id": "copy", "prompt": [1], "answer": [1], "valid": True, "events": []}))
    (tmp_path / "c.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(CorpusError) as err:
        load_corpus(tmp_path / "c.jsonl")
    assert err.value.field == "generator_tag"


def test_invariant_violation_rejected_at_load(tmp_path):
    t = _traj()
    t.events.reverse()
    save_corpus([t], tmp_path / "c.jsonl")
    with pytest.raises(CorpusError, match="non-increasing"):
        load_corpus(tmp_path / "c.jsonl")


def test_distill_keep_invalid_counts(base):
    spec = get_task("copy")
    prompts = [p for p, _ in generate_corpus(spec, 40, 0)]
    cfg = DistillConfig(8, DecodeSchedule.uniform(8, 1), keep_invalid=True)
    trajs, summary = distill(base, prompts, spec, cfg)
    assert len(trajs) == 40 == summary.generated
    assert summary.yield_ratio == summary.valid / 40
    assert all(t.generator_tag == base.version_tag and t.task_id == "copy" for t in trajs)
    kept, s2 = distill(base, prompts, spec, DistillConfig(8, DecodeSchedule.uniform(8, 1)))
    assert len(kept) == s2.valid and all(t.valid for t in kept)


def test_distill_untrained_base_completes_with_low_yield(base):
    spec = get_task("sort")
    prompts = [p for p, _ in generate_corpus(spec, 50, 1)]
    _, summary = distill(base, prompts, spec, DistillConfig(8, DecodeSchedule.uniform(8, 1)))
    assert summary.generated == 50 and summary.yield_ratio <= 0.05


def test_checker_crash_marks_invalid(base):
    spec = get_task("copy")
    broken = type(spec)("copy", spec.sample, lambda p: 1 / 0, spec.space)
    prompts = [p for p, _ in generate_corpus(spec, 5, 0)]
    trajs, summary = distill(base, prompts, broken, DistillConfig(8, DecodeSchedule.uniform(8, 1), True))
    assert summary.valid == 0 and len(trajs) == 5


def test_config_length_checks(base):
    with pytest.raises(ValueError):
        DistillConfig(6, DecodeSchedule.uniform(8, 1))
    with pytest.raises(ValueError):
        distill(base, [["copy", "1"]], get_task("copy"), DistillConfig(10, DecodeSchedule.uniform(10, 1)))


def test_ground_truth_container(tmp_path):
    trajs = pairs_to_trajectories([([14, 1], [1, 15])], "copy")
    save_corpus(trajs, tmp_path / "g.jsonl")
    assert load_corpus(tmp_path / "g.jsonl") == trajs
