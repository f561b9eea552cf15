#!/usr/bin/env python3
"""The central claim, measured: peak live activation bytes during one
forward+backward as the number of coupling blocks per level grows, for
both backward strategies.

Storing every block input makes the peak grow linearly with depth;
reconstructing invertible-block inputs on the way back keeps it flat (the
stored head/tail activations and the transient working set do not depend
on depth). The flop counter shows what that costs.

Run: python3 demos/02_memory_accounting.py
"""

import numpy as np

from revdiff.iunet import IUNet, IUNetConfig
from revdiff.revgraph import MODE_RECOMPUTE, MODE_STORE
from revdiff.rng import Prng

EDGE, LEVELS = 16, 3

print(f"volume {EDGE}^3, {LEVELS} levels, float32, batch 1")
print(f"{'blocks':>6} {'mode':>12} {'peak KiB':>10} {'gflops':>8}")
for blocks in (2, 4, 8):
    cfg = IUNetConfig(
        volume_edge=EDGE,
        levels=LEVELS,
        channel_schedule=(8, 16, 32),
        blocks_per_level=blocks,
        attn_levels=(1, 2),
    )
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        model = IUNet(cfg, seed=0, identity_init=False)
        prng = Prng(5)
        x = prng.randn((1, 1, EDGE, EDGE, EDGE), np.float32)
        model.zero_grads()
        y = model.forward(x, 100, mode)
        model.backward(prng.randn(y.shape, np.float32))
        rep = model.memory_report()
        print(f"{blocks:>6} {mode:>12} {rep.peak_bytes / 1024:>10.1f} "
              f"{model.flops() / 1e9:>8.3f}")

print()
print("timeline of one recompute-mode execution (op index, live KiB):")
cfg = IUNetConfig(blocks_per_level=2)
model = IUNet(cfg, seed=0, identity_init=False)
x = Prng(6).randn((1, 1, 16, 16, 16), np.float32)
model.zero_grads()
y = model.forward(x, 10, MODE_RECOMPUTE)
model.backward(np.ones_like(y))
tl = model.memory_report().timeline
marks = {0, len(tl) // 4, len(tl) // 2, 3 * len(tl) // 4, len(tl) - 1}
for i, (op, live) in enumerate(tl):
    if i in marks:
        print(f"  op {op:>3}  live {live / 1024:>8.1f} KiB")
