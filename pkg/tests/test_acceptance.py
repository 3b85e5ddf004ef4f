"""End-to-end acceptance criteria; each test reports one PASS/FAIL line."""

import time

import numpy as np
import pytest

from minivlm import data, harness
from minivlm import tensor as T
from minivlm.config import LMConfig, ModelConfig, ProjectorConfig, VisionConfig, full_size_config, toy_config
from minivlm.gradcheck import check_gradients
from minivlm.lm import LanguageModel, lm_param_count
from minivlm.model import VisionLanguageModel, exact_answer_accuracy, prepare
from minivlm.projector import Projector, merge_plan, param_count, reduction_ratio
from minivlm.sequence import ConversationSample, build, shift_targets
from minivlm.tensor import Tensor
from minivlm.train import AdamW, PretrainConfig, StageConfig, make_optimizer, run_two_stage, train_step

from test_tensor import CASES

RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of the calling test under its criterion label."""
    label = request.node.get_closest_marker("criterion").args[0]
    yield
    rep = getattr(request.node, "rep_call", None)
    RESULTS[label] = bool(rep and rep.passed)


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------


@pytest.mark.criterion("1 gradient integrity")
def test_gradient_integrity(criterion):
    def run():
        rng = np.random.default_rng(0)
        worst_prim = 0.0
        for name, fn, shapes in CASES:
            params = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
            weights = Tensor(rng.normal(size=fn(params).shape))
            err = check_gradients(lambda: T.sum(T.mul(fn(params), weights)), params, floor=1e-6)
            assert err < 1e-4, (name, err)
            worst_prim = max(worst_prim, err)
        logits = Tensor(rng.normal(size=(2, 5, 7)), requires_grad=True)
        tgt = rng.integers(0, 7, size=(2, 5))
        mask = rng.random((2, 5)) < 0.6
        mask[:, 0] = True
        assert check_gradients(lambda: T.cross_entropy_masked(logits, tgt, mask), [logits]) < 1e-4

        corpus_vocab = data.build_vocabulary()
        cfg = ModelConfig(
            VisionConfig(embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=2),
            ProjectorConfig("xdp", 8, 16, 4),
            LMConfig(vocab_size=len(corpus_vocab), hidden_size=16, num_heads=2, num_layers=1),
        )
        model = VisionLanguageModel(cfg, seed=1)
        for p in model.parameters():
            p.data = rng.normal(0, 0.2, size=p.shape)
        model.set_trainable(("vision_encoder", "projector", "language_model"))
        scene = data.Scene((data.Item("circle", "red", "top left"), data.Item("cross", "green", "bottom right")))
        sample = ConversationSample(
            data.render(scene).transpose(2, 0, 1) / 255.0,
            data.SYSTEM_MESSAGE,
            [("what color is the circle?", "red."), ("where is the green cross?", "at the bottom right.")],
        )
        batch = [prepare(sample, corpus_vocab, cfg)]
        e2e = check_gradients(lambda: model.loss(batch), model.parameters(), floor=1e-7)
        assert e2e < 1e-3, e2e
        return worst_prim, e2e

    (prim, e2e), seconds = timed(run)
    print(f"primitives worst rel err {prim:.2e}, end-to-end {e2e:.2e}, {seconds:.1f}s")
    assert seconds < 60


@pytest.mark.criterion("2 freeze contract")
def test_freeze_contract(criterion, small_corpus):
    vocab = small_corpus.vocab
    cfg = toy_config(len(vocab))
    model = VisionLanguageModel(cfg, seed=0)

    def snap(module):
        return [p.data.tobytes() for p in module.parameters()]

    for stage_no, split in ((1, "alignment"), (2, "instruction")):
        groups = ("projector",) if stage_no == 1 else ("projector", "language_model")
        stage = StageConfig(stage_no, groups, 1e-2, 4)
        examples = [prepare(s, vocab, cfg) for s in small_corpus[split]]
        opt = make_optimizer(model, stage)
        before = {n: snap(m) for n, m in model.groups().items()}
        for step in range(50):
            i = (4 * step) % len(examples)
            train_step(examples[i : i + 4], model, stage, opt)
        after = {n: snap(m) for n, m in model.groups().items()}
        assert after["vision_encoder"] == before["vision_encoder"]
        assert after["projector"] != before["projector"]
        if stage_no == 1:
            assert after["language_model"] == before["language_model"]
        else:
            assert after["language_model"] != before["language_model"]


@pytest.mark.criterion("3 token arithmetic")
def test_token_arithmetic(criterion):
    cfg = full_size_config(kind="xdp", target_tokens=144)
    assert cfg.vision.num_patches == 576
    proj = Projector(cfg.projector, cfg.vision.grid_side, np.random.default_rng(0))
    out = proj(Tensor(np.random.default_rng(1).normal(size=(576, cfg.projector.in_dim))))
    assert out.shape[0] == 144
    assert reduction_ratio(576, 144) == 0.75
    for t in harness.FULL_TOKEN_LADDER:
        ph, pw = merge_plan(24, t)
        assert (24 // ph) * (24 // pw) == t


@pytest.mark.criterion("4 loss-mask contract")
def test_loss_mask_contract(criterion):
    rng = np.random.default_rng(0)
    vocab = data.build_vocabulary()
    sample = ConversationSample(
        None, data.SYSTEM_MESSAGE, [("what color is the square?", "blue."), ("how many shapes are there?", "two.")]
    )
    enc = build(sample, vocab)
    inp, tgt, mask = shift_targets(enc)
    logits = rng.normal(size=(len(inp), len(vocab)))
    perturbed = logits.copy()
    perturbed[~mask] = rng.normal(scale=50.0, size=((~mask).sum(), len(vocab)))
    a, b = Tensor(logits, requires_grad=True), Tensor(perturbed, requires_grad=True)
    la, lb = T.cross_entropy_masked(a, tgt, mask), T.cross_entropy_masked(b, tgt, mask)
    la.backward()
    lb.backward()
    assert la.item() == lb.item()
    assert np.array_equal(a.grad, b.grad)

    lm = LanguageModel(LMConfig(vocab_size=len(vocab), hidden_size=16, num_heads=2, num_layers=1), rng)
    full = lm(lm.embed_tokens(inp))
    loss = T.cross_entropy_masked(full, tgt, mask).item()
    product = 1.0
    for i in np.flatnonzero(mask):
        row = lm(lm.embed_tokens(inp[: i + 1])).data[-1]
        p = np.exp(row - row.max())
        product *= p[tgt[i]] / p.sum()
    assert np.exp(-loss * mask.sum()) == pytest.approx(product, rel=1e-10)


@pytest.mark.criterion("5 overfit sanity")
def test_overfit_sanity(criterion, tmp_path):
    def run():
        out = data.generate_corpus(tmp_path, data.SyntheticSpec(counts={"alignment": 64, "instruction": 64}), seed=0)
        corpus = data.load_corpus(out)
        cfg = toy_config(len(corpus.vocab))
        assert (cfg.lm.hidden_size, cfg.lm.num_layers) == (64, 2)
        stages = (
            StageConfig(1, ("projector",), 3e-3, 16, epochs=10),
            StageConfig(2, ("projector", "language_model"), 3e-3, 16, epochs=150),
        )
        model = run_two_stage(corpus, cfg, stages, seed=0).model
        train = corpus["instruction"]
        acc = model.token_accuracy([prepare(s, corpus.vocab, cfg) for s in train])
        exact = exact_answer_accuracy(model, train, corpus.vocab)
        return acc, exact

    (acc, exact), seconds = timed(run)
    print(f"masked-token accuracy {acc:.4f}, exact answers {exact:.4f}, {seconds:.0f}s")
    assert acc >= 0.95
    assert exact >= 0.90
    assert seconds < 600


@pytest.mark.criterion("6 two-stage benefit")
def test_two_stage_benefit(criterion, tmp_path):
    out = data.generate_corpus(tmp_path / "corpus", data.SyntheticSpec(), seed=0)
    corpus = data.load_corpus(out)
    cfg = toy_config(len(corpus.vocab))
    stages = (
        StageConfig(1, ("projector",), 3e-3, 16, epochs=20),
        StageConfig(2, ("projector", "language_model"), 1e-3, 16, epochs=10),
    )
    steps_per_epoch = -(-len(corpus["instruction"]) // 16)
    with_s1, without_s1 = [], []
    for seed in range(5):
        warm = run_two_stage(corpus, cfg, stages, seed=seed, run=(), lm_pretrain=PretrainConfig(epochs=8))
        init = warm.model.save(tmp_path / f"warm{seed}")
        a = run_two_stage(corpus, cfg, stages, seed=seed, init=init)
        b = run_two_stage(corpus, cfg, stages, seed=seed, run=(2,), init=init)
        with_s1.append(float(np.mean(a.losses[2][-steps_per_epoch:])))
        without_s1.append(float(np.mean(b.losses[2][-steps_per_epoch:])))
    print("with stage 1:   ", np.round(with_s1, 4))
    print("without stage 1:", np.round(without_s1, 4))
    assert np.median(with_s1) < np.median(without_s1)


@pytest.mark.criterion("7 causality and prefix consistency")
def test_causality_and_prefix(criterion):
    def run():
        cfg = LMConfig(vocab_size=194)
        lm = LanguageModel(cfg, np.random.default_rng(0))
        assert lm.num_parameters() == lm_param_count(cfg)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(48, cfg.hidden_size))
        full = lm(Tensor(x)).data
        for j in rng.choice(np.arange(1, 48), size=10, replace=False):
            y = x.copy()
            y[j] += rng.normal(size=cfg.hidden_size)
            assert np.array_equal(lm(Tensor(y)).data[:j], full[:j])
        for i in range(48):
            assert np.array_equal(lm(Tensor(x[: i + 1])).data[i], full[i])
        a = lm.generate(Tensor(x[:10]), max_new=20)
        b = lm.generate(Tensor(x[:10]), max_new=20, use_cache=False)
        assert a.ids == b.ids

    _, seconds = timed(run)
    assert seconds < 60


@pytest.mark.criterion("8 ablation structure")
def test_ablation_structure(criterion, small_corpus, tmp_path):
    settings = harness.AblationSettings(
        stage1=StageConfig(1, ("projector",), 3e-3, 16, epochs=1),
        stage2=StageConfig(2, ("projector", "language_model"), 1e-3, 16, epochs=2),
        pretrain=PretrainConfig(epochs=1),
    )
    grid = harness.default_grid(len(small_corpus.vocab))
    rows = harness.run_ablation(grid, small_corpus, [0], tmp_path / "ablation.csv", settings)
    ladder = harness.token_ladder_plan(out_csv=tmp_path / "ladder.csv")
    import csv

    with open(tmp_path / "ablation.csv") as fh:
        written = list(csv.DictReader(fh))
    assert len(written) == len(grid)
    assert {r["kind"] for r in written} == {"linear", "mlp", "ldp", "ldpv2", "xdp"}
    assert {int(r["target_tokens"]) for r in written if r["kind"] == "xdp"} == set(harness.TOY_TOKEN_LADDER)
    for cell, r in zip(grid, written):
        assert r["status"] == "ok", r["error"]
        assert int(r["params_projector"]) == param_count(cell.config.projector, cell.config.vision.grid_side)
        assert int(r["params_language_model"]) == lm_param_count(cell.config.lm)
        assert all(r[c] != "" for c in harness.ABLATION_COLUMNS if c != "error")
    assert [r["target_tokens"] for r in ladder] == list(harness.FULL_TOKEN_LADDER)
    print("stage-2 epoch losses non-increasing:", {r["config_id"]: r["stage2_monotone"] for r in rows})


@pytest.mark.criterion("9 latency harness")
def test_latency_harness(criterion, small_corpus):
    model = VisionLanguageModel(toy_config(len(small_corpus.vocab)), seed=0)
    prompts = small_corpus["eval"][:4]
    assert harness.benchmark_latency(model, prompts, small_corpus.vocab, reps=0).empty
    rep = harness.benchmark_latency(model, prompts, small_corpus.vocab, reps=3, max_new=16, stop_id=None)
    summary = rep.summary()
    assert {"Samples(token/s) mean", "Samples(token/s) p50", "Total(s)"} <= set(summary)
    assert rep.timers_disjoint()
    for r in rep.rows:
        assert r["tokens_per_sec"] == pytest.approx(r["tokens"] / r["decode_s"])
    assert summary["Total(s)"] == pytest.approx(sum(r["decode_s"] for r in rep.rows))
    ratio = harness.decode_scaling(model, prompts[0], small_corpus.vocab)
    print(f"decode time ratio (2n vs n, normalised) {ratio:.3f}")
    assert 0.7 <= ratio <= 1.3


@pytest.mark.criterion("10 AdamW hand-check")
def test_adamw_hand_check(criterion):
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([w], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    w.grad = np.array([1.0])
    opt.step()
    m_hat = ((1 - 0.9) * 1.0) / (1 - 0.9**1)
    v_hat = ((1 - 0.999) * 1.0) / (1 - 0.999**1)
    expected = 1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(w.data[0] - expected) <= 1e-12 * abs(expected)
