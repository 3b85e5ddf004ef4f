import csv

import numpy as np
import pytest

from minivlm import harness
from minivlm.config import toy_config
from minivlm.model import VisionLanguageModel
from minivlm.projector import param_count
from minivlm.lm import lm_param_count
from minivlm.train import PretrainConfig, StageConfig


@pytest.fixture(scope="module")
def quick():
    return harness.AblationSettings(
        stage1=StageConfig(1, ("projector",), 3e-3, 8, epochs=2),
        stage2=StageConfig(2, ("projector", "language_model"), 1e-3, 8, epochs=2),
        pretrain=PretrainConfig(epochs=1),
    )


def test_default_grid_cells(small_corpus):
    cells = harness.default_grid(len(small_corpus.vocab))
    ids = [c.config_id for c in cells]
    assert ids == ["linear-16", "mlp-16", "ldp-4", "ldpv2-4", "xdp-4", "xdp-16", "xdp-1"]
    assert {c.config.projector.kind for c in cells} == {"linear", "mlp", "ldp", "ldpv2", "xdp"}
    sized = harness.default_grid(len(small_corpus.vocab), lm_sizes=[(32, 1)])[-1]
    assert (sized.config.lm.hidden_size, sized.config.lm.num_layers, sized.config.projector.out_dim) == (32, 1, 32)


def test_ablation_rows_and_failures(small_corpus, quick, tmp_path):
    vocab = len(small_corpus.vocab)
    good = harness.Cell("xdp-4", toy_config(vocab, "xdp", 4))
    bad_cfg = toy_config(vocab, "xdp", 4).replace(lm={"max_context": 8})
    bad = harness.Cell("too-short", bad_cfg)
    rows = harness.run_ablation([good, bad], small_corpus, seeds=[0], out_csv=tmp_path / "a.csv", settings=quick)
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "max_context" in rows[1]["error"]
    with open(tmp_path / "a.csv") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == harness.ABLATION_COLUMNS
        written = list(reader)
    assert len(written) == 2
    ok = rows[0]
    assert ok["params_projector"] == ok["closed_form_projector"] == param_count(good.config.projector, 4)
    assert ok["params_language_model"] == ok["closed_form_language_model"] == lm_param_count(good.config.lm)
    assert isinstance(ok["stage2_monotone"], bool)
    assert 0.0 <= ok["eval_exact_accuracy"] <= 1.0


def test_ablation_is_idempotent(small_corpus, quick):
    cell = harness.Cell("ldp-4", toy_config(len(small_corpus.vocab), "ldp", 4))
    a = harness.run_ablation([cell], small_corpus, [1], settings=quick)[0]
    b = harness.run_ablation([cell], small_corpus, [1], settings=quick)[0]
    timing = {"tokens_per_sec"}
    assert {k: v for k, v in a.items() if k not in timing} == {k: v for k, v in b.items() if k not in timing}


def test_token_ladder_plan(tmp_path):
    rows = harness.token_ladder_plan(out_csv=tmp_path / "ladder.csv")
    assert [r["target_tokens"] for r in rows] == list(harness.FULL_TOKEN_LADDER)
    for r in rows:
        assert (24 // r["pool_h"]) * (24 // r["pool_w"]) == r["target_tokens"]
    assert next(r for r in rows if r["target_tokens"] == 144)["reduction"] == 0.75


def test_median_by_tokens():
    rows = [
        {"status": "ok", "kind": "xdp", "target_tokens": 4, "eval_exact_accuracy": v} for v in (0.1, 0.5, 0.3)
    ] + [{"status": "failed", "kind": "xdp", "target_tokens": 1}]
    assert harness.median_by_tokens(rows) == {4: 0.3}


def test_is_non_increasing():
    assert harness.is_non_increasing([3, 2, 2, 1])
    assert not harness.is_non_increasing([3, 4])


@pytest.fixture(scope="module")
def model(small_corpus):
    return VisionLanguageModel(toy_config(len(small_corpus.vocab)), seed=0)


def test_zero_reps_gives_empty_report(model, small_corpus):
    rep = harness.benchmark_latency(model, small_corpus["eval"][:2], small_corpus.vocab, reps=0)
    assert rep.empty and rep.summary() == {}


def test_latency_report_columns(model, small_corpus, tmp_path):
    rep = harness.benchmark_latency(model, small_corpus["eval"][:2], small_corpus.vocab, reps=2, max_new=5, stop_id=None)
    summary = rep.summary()
    for key in ("Samples(token/s) mean", "Samples(token/s) p50", "Total(s)"):
        assert key in summary
    assert summary["runs"] == 4
    assert all(r["tokens"] == 5 for r in rep.rows)
    assert summary["Total(s)"] == pytest.approx(sum(r["decode_s"] for r in rep.rows))
    assert rep.timers_disjoint()
    # headline throughput counts only decode time
    for r in rep.rows:
        assert r["tokens_per_sec"] == pytest.approx(r["tokens"] / r["decode_s"])
    rep.write(tmp_path / "b.csv", tmp_path / "b.json")
    assert (tmp_path / "b.json").read_text().count("Samples(token/s)") == 2


def test_evaluate_writes_jsonl(model, small_corpus, tmp_path):
    res = harness.evaluate(model, small_corpus["eval"][:2], small_corpus.vocab, out_jsonl=tmp_path / "e.jsonl", max_new=4)
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert res["answers"] == len(lines) == sum(len(s.turns) for s in small_corpus["eval"][:2])
    assert harness.evaluate(model, [], small_corpus.vocab)["answers"] == 0


def test_decode_scaling_is_linear(model, small_corpus):
    ratio = harness.decode_scaling(model, small_corpus["eval"][0], small_corpus.vocab)
    assert 0.7 <= ratio <= 1.3
