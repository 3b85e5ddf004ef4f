# decoding throughput, preprocessing kept out of the clock
import tempfile

from minivlm import SyntheticSpec, VisionLanguageModel, generate_corpus, load_corpus, toy_config
from minivlm import harness

tmp = tempfile.mkdtemp()
corpus = load_corpus(generate_corpus(tmp, SyntheticSpec(counts={"eval": 8}), seed=1))
model = VisionLanguageModel(toy_config(len(corpus.vocab)), seed=0)

report = harness.benchmark_latency(model, corpus["eval"][:4], corpus.vocab, reps=3, max_new=16, stop_id=None)
for k, v in report.summary().items():
    print(k, v)
print("timers disjoint", report.timers_disjoint())

# twice the tokens should take about twice as long
print("scaling", harness.decode_scaling(model, corpus["eval"][0], corpus.vocab))

# the token ladder at full size
for row in harness.token_ladder_plan()[:4]:
    print(row)
