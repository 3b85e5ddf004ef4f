import numpy as np
import pytest

from minivlm import tensor as T
from minivlm.config import LMConfig, ModelConfig, ProjectorConfig, VisionConfig, toy_config
from minivlm.gradcheck import check_gradients
from minivlm.model import VisionLanguageModel, exact_answer_accuracy, prepare


def test_parameter_counts_match_closed_form(small_corpus):
    model = VisionLanguageModel(toy_config(vocab_size=len(small_corpus.vocab)))
    counts = model.param_counts()
    assert counts["projector"] == model.closed_form_counts()["projector"] == 12416
    assert counts["language_model"] == model.closed_form_counts()["language_model"]
    assert counts["vision_encoder"] == 32160


def test_mismatched_dimensions_rejected():
    with pytest.raises(ValueError):
        ModelConfig(VisionConfig(), ProjectorConfig("xdp", 16, 64, 4), LMConfig())
    with pytest.raises(ValueError):
        ModelConfig(VisionConfig(), ProjectorConfig("xdp", 32, 48, 4), LMConfig())


def test_spliced_batch_layout(small_corpus):
    vocab = small_corpus.vocab
    cfg = toy_config(vocab_size=len(vocab))
    model = VisionLanguageModel(cfg)
    examples = [prepare(s, vocab, cfg) for s in small_corpus["instruction"][:3]]
    x, tgt, msk = model.batch_inputs(examples)
    n_vis = cfg.projector.target_tokens
    widths = [len(ex.inputs) - 1 + n_vis for ex in examples]
    assert x.shape == (3, max(widths), cfg.lm.hidden_size)
    for b, ex in enumerate(examples):
        assert msk[b].sum() == ex.target_mask.sum()
        assert not msk[b, widths[b]:].any()
        np.testing.assert_array_equal(tgt[b][msk[b]], ex.targets[ex.target_mask])


def test_end_to_end_gradients_match_finite_differences(small_corpus):
    """Encoder -> XDP -> decoder -> masked loss, all groups trainable, 64-bit."""
    vocab = small_corpus.vocab
    cfg = ModelConfig(
        VisionConfig(embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=2),
        ProjectorConfig("xdp", 8, 16, 4),
        LMConfig(vocab_size=len(vocab), hidden_size=16, num_heads=2, num_layers=1),
    )
    model = VisionLanguageModel(cfg, seed=2)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data = rng.normal(0, 0.2, size=p.shape)
    model.set_trainable(("vision_encoder", "projector", "language_model"))
    batch = [prepare(s, vocab, cfg) for s in small_corpus["instruction"][:2]]
    err = check_gradients(lambda: model.loss(batch), model.parameters(), max_entries=4, rng=rng, floor=1e-7)
    assert err < 1e-3


def test_answer_returns_text_and_timing(small_corpus):
    vocab = small_corpus.vocab
    model = VisionLanguageModel(toy_config(vocab_size=len(vocab)))
    sample = small_corpus["eval"][0]
    text, gen = model.answer(sample, vocab, turn=0, max_new=3)
    assert isinstance(text, str) and 1 <= len(gen.ids) <= 3
    acc = exact_answer_accuracy(model, small_corpus["eval"][:2], vocab)
    assert 0.0 <= acc <= 1.0


def test_frozen_encoder_features_are_not_recorded(small_corpus):
    vocab = small_corpus.vocab
    model = VisionLanguageModel(toy_config(vocab_size=len(vocab)))
    model.set_trainable(("projector",))
    feats = model.encode_images(np.zeros((1, 3, 32, 32)))
    assert not feats.requires_grad
