#!/usr/bin/env python3
"""Train the reversible denoiser on synthetic phantoms for a short run and
plot/print the loss curve. Everything is seeded: run it twice and the CSV
is byte-identical.

Run: python3 demos/03_train_phantom_ddpm.py [steps]
"""

import sys

from revdiff.data import gen_dataset
from revdiff.diffusion import TrainConfig, cosine_schedule, train_loop
from revdiff.iunet import IUNet, IUNetConfig, checkpoint_save
from revdiff.revgraph import MODE_RECOMPUTE

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120

print("generating 64 phantoms (16^3)...")
vols = [v.data for v in gen_dataset(1, 64, 16)]

model = IUNet(IUNetConfig(), seed=1)
cfg = TrainConfig(steps=steps, batch=2, seed=1)
sched = cosine_schedule(2000)

print(f"training {steps} steps (invertible-recompute backward)...")
rows = train_loop(
    model, vols, cfg, sched, MODE_RECOMPUTE,
    log_cb=lambda r: print(f"  step {r.step:>4}  loss {r.loss:.4f}  lr {r.lr:.2e}")
    if r.step % max(1, steps // 10) == 0 else None,
)

with open("train_log.csv", "w") as fh:
    fh.write("step,loss,lr,peak_bytes\n")
    for r in rows:
        fh.write(r.csv() + "\n")
checkpoint_save(model, "phantom.ckpt")
print("wrote train_log.csv and phantom.ckpt")

first = sum(r.loss for r in rows[:20]) / 20
last = sum(r.loss for r in rows[-20:]) / 20
print(f"mean loss, first 20 steps: {first:.4f}; last 20 steps: {last:.4f}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.figure(figsize=(6, 3.5))
    plt.plot([r.step for r in rows], [r.loss for r in rows], lw=0.8)
    plt.xlabel("step")
    plt.ylabel("loss")
    plt.title("phantom DDPM training loss")
    plt.tight_layout()
    plt.savefig("train_loss.png", dpi=120)
    print("wrote train_loss.png")
except ImportError:
    pass
