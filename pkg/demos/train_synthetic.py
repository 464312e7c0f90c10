"""Train a small matching field on synthetic rigid warps and watch it learn.

Run:  python3 demos/train_synthetic.py [out_dir]

Each pair is a random texture and a rotated, shifted copy of it, so the true
correspondence of every pixel is known.  Training only sees 20 keypoints per
pair; afterwards we ask the field for the best match of every keypoint by
brute force and score the result with PCK.
"""

import sys
from pathlib import Path

import numpy as np

from nemf.cost_embed import embed
from nemf.data import generate_synthetic, pck_table, prepare_pair
from nemf.field import MatchingField
from nemf.inference import match_exhaustive
from nemf.training import TrainConfig, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-train")

# Eight pairs of 31x31 images; descriptors are pooled onto a 16x16 grid per
# image, giving a 16^4 cost volume per pair.
synthetic = generate_synthetic(8, "rigid", seed=0)
pairs = [prepare_pair(s.images, s.annotation) for s in synthetic]
print(f"{len(pairs)} pairs, cost volume {pairs[0].cost.shape}")

# A narrow network and a large step size keep this to well under a minute.
cfg = TrainConfig(steps=150, seed=1, lr=1e-3, hidden=64)
result = train(pairs, cfg, out_dir=out,
               progress=lambda step, loss: step % 25 == 0 and print(f"  step {step:4d}  loss {loss:8.4f}"))
trace = np.array(result.trace)
print(f"loss {trace[0, 3]:.3f} -> {trace[-10:, 3].mean():.3f} (mean of the last 10 steps)")

# Brute-force matching of each annotated source keypoint over all target pixels.
predictions = []
for p in pairs:
    field = MatchingField(result.model, embed(p.cost, result.embedder), p.src_shape, p.tgt_shape)
    targets, _ = match_exhaustive(field, p.keypoints[:, :2], p.tgt_shape)
    predictions.append(targets)
table = pck_table(predictions, [s.annotation for s in synthetic])
print("PCK " + "  ".join(f"@{a:g}: {v:.3f}" for a, v in table.items()))
print(f"checkpoint and loss trace in {out}/")
