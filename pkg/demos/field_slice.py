"""Look at one 2D slice of the 4D matching field.

Run:  python3 demos/field_slice.py CHECKPOINT

Fixing a source pixel turns the field into a score map over the target
image.  A well-trained field shows a bright peak at the true match.  Scores
of a trained field crowd near 1, so the ASCII shading is stretched between
the slice's minimum and maximum; X marks the ground truth.
"""

import sys

import numpy as np

from nemf.cli import load_checkpoint
from nemf.cost_embed import embed
from nemf.data import export_field_slice, generate_synthetic, prepare_pair
from nemf.field import MatchingField

if len(sys.argv) < 2:
    sys.exit(__doc__)
model, embedder, extractor = load_checkpoint(sys.argv[1])
(sample,) = generate_synthetic(1, "rigid", seed=7)
pair = prepare_pair(sample.images, sample.annotation, extractor)
field = MatchingField(model, embed(pair.cost, embedder), pair.src_shape, pair.tgt_shape)

kps = sample.annotation.keypoints
central = np.argmin(np.abs(kps[:, :2] - 15).sum(axis=1))  # keypoint nearest the image centre
source, truth = kps[central, :2], kps[central, 2:]
grid = export_field_slice(field, source, pair.tgt_shape, "field_slice.csv")

shades = " .:-=+*#%@"
peak = np.unravel_index(np.argmax(grid), grid.shape)
print(f"source pixel ({source[0]:g}, {source[1]:g}), true match ({truth[0]:.1f}, {truth[1]:.1f}), "
      f"field peak ({peak[0]}, {peak[1]}), scores {grid.min():.4f} to {grid.max():.4f}")
level = (grid - grid.min()) / max(grid.max() - grid.min(), 1e-12)
for r in range(grid.shape[0]):
    row = ""
    for c in range(grid.shape[1]):
        if (r, c) == tuple(np.rint(truth).astype(int)):
            row += "X"
        else:
            row += shades[min(int(level[r, c] * len(shades)), len(shades) - 1)]
    print(row)
print("scores written to field_slice.csv")
