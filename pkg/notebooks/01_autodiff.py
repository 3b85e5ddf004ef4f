# reverse-mode autodiff on numpy arrays
import numpy as np

from minivlm import tensor as T
from minivlm.gradcheck import check_gradients
from minivlm.tensor import Tensor

rng = np.random.default_rng(0)

# a tiny two-layer net
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)

h = T.gelu(x @ w1)
out = T.sum(T.mul(h @ w2, h @ w2))
out.backward()
print(out.item())
print(w1.grad.shape, w2.grad.shape)

# compare against central differences
err = check_gradients(lambda: T.sum(T.mish(x @ w1)), [w1])
print("max rel error", err)

# masked cross-entropy only counts the positions where mask is True
logits = Tensor(rng.normal(size=(6, 10)), requires_grad=True)
targets = rng.integers(0, 10, size=6)
mask = np.array([False, False, True, True, False, True])
loss = T.cross_entropy_masked(logits, targets, mask)
loss.backward()
print(loss.item())
print(np.abs(logits.grad).sum(axis=1))  # zero rows where mask is False
