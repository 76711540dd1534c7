#!/usr/bin/env python3
# A short desk-scale training run, then evaluation and a look inside:
# the per-stage noise features and the predicted kernels.
#
# python3 demos/03_train_and_inspect.py [iterations]   (default 200, a few minutes)

import sys
import tempfile
from pathlib import Path

import numpy as np

from cfnet.harness import NoiseSpec, TrainConfig, evaluate, export_introspection, train
from cfnet.harness.data import write_fixture_set
from cfnet.network import ArchConfig

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200
work = Path(tempfile.mkdtemp(prefix="cfnet_demo_"))

# %% synthetic scenes stand in for a photo collection
write_fixture_set(work / "train", 20, seed=0, size=64)
write_fixture_set(work / "test", 4, seed=1, size=64)

# %% train on sigma = 25 AWGN; small widths keep this CPU friendly
cfg = TrainConfig(lr_init=1e-3, warmup=50, batch_size=4, patch_size=32, max_iters=iters,
                  val_every=50, ckpt_every=0)
res = train(cfg, ArchConfig(), work / "train", work / "run")
for it, p, noisy in res.val:
    print(f"iter {it:4d}  val PSNR {p:.2f} dB  (noisy input {noisy:.2f} dB)")

# %% held-out evaluation with deterministic per-image noise
report = evaluate(work / "run" / "last.cfn", work / "test", NoiseSpec(sigma=25))
print(report.to_text())

# %% inside the network: one noise-feature map per U-Net stage ...
img = sorted((work / "test").iterdir())[0]
maps = export_introspection(work / "run" / "last.cfn", img, "noisemaps", work / "maps")
print("noise maps:", [m.name for m in maps])

# ... and the conditional kernels at a few pixels of the first stage
files = export_introspection(work / "run" / "last.cfn", img, "kernels", work / "kernels",
                             positions=[(8, 8), (32, 32)])
print(files[0].read_text().splitlines()[-1])
print("outputs in", work)
