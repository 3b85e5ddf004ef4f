# two-stage training on the synthetic shapes corpus (well under a minute)
import tempfile

import numpy as np

from minivlm import (
    PretrainConfig,
    StageConfig,
    SyntheticSpec,
    exact_answer_accuracy,
    generate_corpus,
    load_corpus,
    prepare,
    run_two_stage,
    toy_config,
)

tmp = tempfile.mkdtemp()
spec = SyntheticSpec(counts={"alignment": 64, "instruction": 64, "eval": 16, "text": 64})
corpus = load_corpus(generate_corpus(tmp, spec, seed=0))
print({s: len(corpus[s]) for s in ("alignment", "instruction", "eval", "text")})

sample = corpus["instruction"][0]
print(sample.turns[0])
print(sample.image.shape)

cfg = toy_config(len(corpus.vocab))
stages = (
    StageConfig(1, ("projector",), 3e-3, 16, epochs=5),
    StageConfig(2, ("projector", "language_model"), 3e-3, 16, epochs=30),
)
res = run_two_stage(corpus, cfg, stages, seed=0, lm_pretrain=PretrainConfig(epochs=3))
print("stage 1 last loss", res.losses[1][-1])
print("stage 2 last loss", res.losses[2][-1])

model = res.model
train = [prepare(s, corpus.vocab, cfg) for s in corpus["instruction"]]
print("token accuracy", model.token_accuracy(train))
print("exact answers", exact_answer_accuracy(model, corpus["instruction"], corpus.vocab))
print("held-out exact answers", exact_answer_accuracy(model, corpus["eval"], corpus.vocab))
print(np.round(res.losses[2][::10], 3))
