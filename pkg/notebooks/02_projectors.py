# how each projector turns a patch grid into visual tokens
import numpy as np

from minivlm import full_size_config, toy_config
from minivlm.projector import Projector, merge_plan, param_count, reduction_ratio
from minivlm.tensor import Tensor

rng = np.random.default_rng(0)

# full-size shapes: 24x24 patch grid
cfg = full_size_config(kind="xdp", target_tokens=144)
print(cfg.vision.num_patches, "patches ->", cfg.projector.target_tokens, "tokens")
print("reduction", reduction_ratio(576, 144))

# merge window for every reachable token count
for t in (576, 144, 64, 36, 16, 9, 4, 1):
    print(t, merge_plan(24, t))

# toy scale: compare the five kinds
for kind in ("linear", "mlp", "ldp", "ldpv2", "xdp"):
    c = toy_config(vocab_size=194, kind=kind)
    p = Projector(c.projector, c.vision.grid_side, rng)
    feats = Tensor(rng.normal(size=(c.vision.num_patches, c.projector.in_dim)))
    print(kind, p(feats).shape, param_count(c.projector, c.vision.grid_side))

# asking for a count the grid cannot reach fails early
try:
    toy_config(vocab_size=194, kind="xdp", target_tokens=5)
except ValueError as exc:
    print(exc)
