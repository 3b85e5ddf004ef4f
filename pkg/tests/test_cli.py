import csv
import json

import pytest

from minivlm.cli import main, model_config, stage_configs


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, [json.loads(line) for line in out]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "data.toml").write_text("counts.alignment = 8\ncounts.instruction = 8\ncounts.eval = 2\ncounts.text = 16\n")
    (d / "train.toml").write_text(
        "[stage1]\nlearning_rate = 3e-3\nbatch_size = 8\nepochs = 1\n"
        "[stage2]\nlearning_rate = 1e-3\nbatch_size = 8\nepochs = 1\n"
        "[pretrain]\nepochs = 1\n"
    )
    return d


def test_full_cli_flow(workdir, capsys):
    d = workdir
    code, out = run(capsys, "gen-data", "--out", d / "corpus", "--seed", 2, "--config", d / "data.toml", "--verify")
    assert code == 0 and out[0]["counts"]["alignment"] == 8 and out[1]["inconsistencies"] == 0

    code, out = run(capsys, "train", "--stage", "1", "--config", d / "train.toml", "--corpus", d / "corpus", "--out", d / "r1")
    assert code == 0 and set(out[0]["checkpoints"]) == {"1"}

    code, out = run(
        capsys, "train", "--stage", "2", "--config", d / "train.toml", "--corpus", d / "corpus",
        "--out", d / "r2", "--init", d / "r1" / "stage1",
    )
    assert code == 0 and set(out[0]["final_loss"]) == {"2"}
    with open(d / "r2" / "losses.csv") as fh:
        assert tuple(csv.DictReader(fh).fieldnames) == ("step", "stage", "loss", "lr", "tokens_per_sec")

    code, out = run(capsys, "eval", "--checkpoint", d / "r2" / "stage2", "--corpus", d / "corpus", "--out", d / "ev.jsonl")
    assert code == 0 and out[0]["answers"] == len((d / "ev.jsonl").read_text().splitlines())

    code, out = run(
        capsys, "bench", "--checkpoint", d / "r2" / "stage2", "--corpus", d / "corpus",
        "--reps", 1, "--max-new", 4, "--no-stop", "--out", d / "bench",
    )
    assert code == 0 and "Samples(token/s) mean" in out[0] and "Total(s)" in out[0]
    assert (d / "bench" / "bench.csv").exists()

    code, out = run(capsys, "bench", "--checkpoint", d / "missing", "--corpus", d / "corpus", "--reps", 0)
    assert code == 0 and out == [{}]


def test_projector_flags(workdir, capsys):
    d = workdir
    if not (d / "corpus").exists():
        run(capsys, "gen-data", "--out", d / "corpus", "--seed", 2, "--config", d / "data.toml")
    code, out = run(
        capsys, "train", "--config", d / "train.toml", "--corpus", d / "corpus", "--out", d / "r3",
        "--projector", "ldpv2", "--visual-tokens", 1,
    )
    assert code == 0
    from minivlm.model import VisionLanguageModel

    model = VisionLanguageModel.load(d / "r3" / "stage2")
    assert (model.config.projector.kind, model.config.projector.target_tokens) == ("ldpv2", 1)


def test_ablate_cli(workdir, capsys):
    d = workdir
    if not (d / "corpus").exists():
        run(capsys, "gen-data", "--out", d / "corpus", "--seed", 2, "--config", d / "data.toml")
    code, out = run(
        capsys, "ablate", "--corpus", d / "corpus", "--out", d / "abl", "--config", d / "train.toml",
        "--cells", "linear-16", "xdp-1", "--seeds", 0,
    )
    assert code == 0 and out[0]["rows"] == 2 and out[0]["failed"] == 0
    with open(d / "abl" / "token_ladder.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 11


def test_bad_input_exits_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path), "--corpus", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_unsupported_token_count_is_reported(workdir, capsys):
    with pytest.raises(ValueError, match="valid counts"):
        model_config({}, 50, "xdp", 3)
    code = main(["train", "--corpus", str(workdir / "corpus"), "--out", str(workdir / "x"), "--visual-tokens", "3"])
    assert code == 2 and "valid counts" in capsys.readouterr().err


def test_config_sections():
    raw = {"lm": {"hidden_size": 32, "num_layers": 1}, "stage1": {"learning_rate": 0.5, "betas": [0.8, 0.9]}}
    cfg = model_config(raw, 77)
    assert (cfg.lm.vocab_size, cfg.lm.hidden_size, cfg.projector.out_dim, cfg.projector.target_tokens) == (77, 32, 32, 4)
    s1, s2 = stage_configs(raw)
    assert s1.learning_rate == 0.5 and s1.betas == (0.8, 0.9) and s2.learning_rate == 4e-5
