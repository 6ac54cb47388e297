"""Measuring how well scaled sign patterns approximate the shadow weights.

error = mean |alpha * sign(w) - w|, with alpha the per-filter mean
absolute weight (the scale the kernels actually apply). The error is zero
exactly when a filter is a scalar multiple of its sign pattern, and it is
what limits gradient fidelity once weights binarize.
"""

import numpy as np

from bitcontext import analysis as an
from bitcontext import data as dt
from bitcontext import network as nw
from bitcontext import train as tr

rng = np.random.default_rng(0)

w = np.array([[1.0, -1.0, 3.0]])
print("w = [1, -1, 3]:   error =", round(an.binarization_error(w, "xnor"), 6),
      "(alpha = 5/3)")
print("0.4 * sign(w):    error =",
      an.binarization_error(0.4 * np.sign(rng.normal(size=(2, 8))), "xnor"))
print("literal-mode variant (scale ||sign(w)||_1/c_in):",
      round(an.binarization_error(w, "literal"), 6))

# Per-branch report over a briefly trained desk model.
train = dt.synthetic_pairs_dataset(1500, size=16, channels=1, seed=0)
net = nw.build(nw.desk_micro(), seed=0)
cfg = tr.TrainConfig(step=1, iterations=150, batch_size=64, lr=2e-3,
                     augment="roll", seed=0)
tr.train_step(net, train, cfg)

print("\nper-branch binarization error after a short step-1 run")
print("(P = pointwise, S = short-range, L = long-range):")
print(an.per_branch_report(net).to_delimited())
