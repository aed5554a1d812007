"""The reverse-mode engine underneath every model in this package.

Run:  python demos/02_gradients_from_scratch.py

Tensors record the operation that produced them; ``backward`` walks the
graph in reverse topological order.  ``grad_check`` compares the result with
central finite differences, and ``adam_step`` applies bias-corrected Adam.
"""

import numpy as np

from tcmkd import autodiff as ad
from tcmkd.autodiff import AdamConfig, Parameter, Tensor

rng = np.random.default_rng(0)

# %% A small convolutional graph ---------------------------------------------
x = Tensor(rng.standard_normal((4, 2, 32)))
w = Parameter("w", rng.standard_normal((3, 2, 5)) * 0.3)
b = Parameter("b", np.zeros(3))
head = Parameter("head", rng.standard_normal((2, 3 * 8)) * 0.3)
head_b = Parameter("head_b", np.zeros(2))
labels = np.array([0, 1, 1, 0])


def loss_fn():
    h = ad.relu(ad.conv1d(x, w, b, stride=2, padding="same"))  # (4, 3, 16)
    h = ad.max_pool1d(h, 2)                                      # (4, 3, 8)
    return ad.softmax_cross_entropy(ad.linear(ad.flatten(h), head, head_b), labels)


params = [w, b, head, head_b]
print(f"initial loss {float(loss_fn().data):.4f}")
print(f"finite-difference check, max relative error {ad.grad_check(loss_fn, params):.2e}")

# %% Adam on the same graph ---------------------------------------------------
cfg = AdamConfig(learning_rate=0.05)
for step in range(1, 61):
    loss = loss_fn()
    ad.backward(loss)
    ad.adam_step(params, cfg)
    if step % 20 == 0:
        print(f"step {step:>3}: loss {float(loss.data):.4f}")

# %% Same-padding arithmetic ---------------------------------------------------
for length, kernel, stride in ((1024, 64, 16), (5120, 320, 80), (32, 3, 1)):
    left, right, out = ad.same_padding(length, kernel, stride)
    print(f"L={length:>4} K={kernel:>3} s={stride:>2}: pad ({left}, {right}) -> {out} outputs")
