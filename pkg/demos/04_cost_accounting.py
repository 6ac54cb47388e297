"""Analytic complexity accounting: BOPs, FLOPs and OPs = BOPs/64 + FLOPs.

The full-scale preset reproduces the reported complexity of the
MobileNet-shaped binary network with 11 conv + 9 MLP blocks, and the
single-block numbers show why three MLP blocks trade one-for-one against
a 3x3 conv block.
"""

from bitcontext import costmodel as cm
from bitcontext import network as nw

report = cm.count_network(nw.bcdnet_a_like())
print(f"bcdnet-a-like:  BOPs {report.bops / 1e9:.2f}e9   "
      f"FLOPs {report.flops / 1e8:.2f}e8   OPs {report.ops / 1e8:.2f}e8   "
      f"conv+fc {report.ops_convfc / 1e8:.2f}e8")

rb = cm.count_network(nw.bcdnet_b_like())
print(f"bcdnet-b-like:  BOPs {rb.bops / 1e9:.2f}e9 (unchanged)   "
      f"FLOPs {rb.flops / 1e8:.2f}e8 (dynamic embeddings)")

print("\nsingle blocks at 512 channels, 7x7 tokens:")
conv = cm.conv_block_ops(512, 7, 7)
mlp = cm.mlp_block_ops(512, 7, 7)
for k in (1, 2, 3):
    print(f"  {k} MLP block(s) vs 1 conv block: x{k * mlp / conv:.2f}")
print("  (2-ops-per-MAC convention:",
      f"conv {cm.conv_block_ops(512, 7, 7, 2) / 1e6:.3f}e6,",
      f"MLP {cm.mlp_block_ops(512, 7, 7, 2) / 1e6:.3f}e6)")

print("\nper-layer table for the desk-tiny preset:")
print(cm.count_network(nw.desk_tiny()).to_text())
