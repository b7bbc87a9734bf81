"""A few operations through the reverse-mode engine, checked against central differences.

    python demos/01_autodiff.py
"""

import numpy as np

from stimswin.tensor import Tensor, finite_diff_grad, gelu, layer_norm, linear, max_relative_error, softmax_lastdim

g = np.random.default_rng(0)
x = Tensor(g.standard_normal((4, 6)), requires_grad=True, dtype=np.float64)
w = Tensor(g.standard_normal((6, 3)), requires_grad=True, dtype=np.float64)
b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
gamma = Tensor(np.ones(6), requires_grad=True, dtype=np.float64)
beta = Tensor(np.zeros(6), requires_grad=True, dtype=np.float64)
target = g.standard_normal((4, 3))


def f():
    h = gelu(linear(layer_norm(x, gamma, beta), w, b))
    return (softmax_lastdim(h) * target).sum()


loss = f()
loss.backward()
print(f"loss = {loss.item():.6f}")
for name, t in [("x", x), ("w", w), ("b", b), ("gamma", gamma), ("beta", beta)]:
    numeric = finite_diff_grad(lambda _: f(), t, h=1e-5)
    print(f"{name:>5}: max relative error {max_relative_error(t.grad, numeric):.2e}")
