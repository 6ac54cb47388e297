"""Straight-through gradients for the sign function.

Training keeps full-precision shadow weights. The forward pass runs the
hard sign (so the bit kernels stay exact); the backward pass uses the
derivative of a piecewise polynomial surrogate, which is zero outside
[-1, 1] and peaks at the threshold. Passing surrogate=True swaps the
forward to the polynomial itself, which is what gradient checks
differentiate.
"""

import numpy as np

from bitcontext import autograd as ag

# The surrogate and its slope.
xs = np.linspace(-1.6, 1.6, 9)
print("x      :", np.round(xs, 2))
print("q(x)   :", np.round(ag.qb_forward(xs), 3))
print("q'(x)  :", np.round(ag.qb_grad(xs), 3))

# A tiny binarized layer; gradients flow to weights, inputs and the
# learnable threshold.
rng = np.random.default_rng(1)
x = ag.param(rng.uniform(-1, 1, size=(4, 6)), dtype=np.float64)
thr = ag.param(np.zeros(6), dtype=np.float64)
w = ag.param(rng.normal(size=(6, 3)) * 0.4, dtype=np.float64)
labels = np.array([0, 1, 2, 0])

xb = ag.binarize(x, thr, surrogate=True)
loss = ag.cross_entropy(ag.linear(xb, w), labels, smoothing=0.1)
loss.backward()
print("\nloss:", float(loss.data))
print("threshold grad:", np.round(thr.grad, 4))

# Finite differences of the surrogate forward agree with the backward pass.
idx = (2, 3)
h = 1e-6
v = x.data[idx]
x.data[idx] = v + h
lp = float(ag.cross_entropy(ag.linear(ag.binarize(
    ag.Tensor(x.data), ag.Tensor(thr.data), surrogate=True),
    ag.Tensor(w.data)), labels, 0.1).data)
x.data[idx] = v - h
lm = float(ag.cross_entropy(ag.linear(ag.binarize(
    ag.Tensor(x.data), ag.Tensor(thr.data), surrogate=True),
    ag.Tensor(w.data)), labels, 0.1).data)
x.data[idx] = v
print(f"finite diff {(lp - lm) / (2 * h):+.6f}  backward {x.grad[idx]:+.6f}")
