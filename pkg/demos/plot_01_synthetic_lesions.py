"""
Synthetic lesion images
=======================

Every sample is a Perlin-noise background inside an elliptical brain mask.
Class 2 samples also carry darkening lesions whose support is the
ground-truth map a saliency method should find.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from lesionbench import synthgen as sg
from lesionbench.harness.render import gray_tile, montage_array, truth_tile

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output")
out.mkdir(exist_ok=True)

# A background is lattice gradient noise rescaled to [0, 1]
field = sg.perlin_field(seed=7, grid=(2, 3), shape=(64, 64))
print("background range", field.min(), field.max())

# Lesions are discs with a radial Hamming profile, placed inside the mask
mask = sg.default_mask((64, 64))
spec = sg.LesionSpec(diameter=10, intensity=0.3, count=2)
factors, truth = sg.lesion_map(lesion_seed=3, mask=mask, spec=spec, shape=(64, 64))
print("attenuation at the darkest pixel", factors.min(), "lesion pixels", truth.sum())

# The desk preset builds whole splits; the same seed gives the same bytes
config = sg.desk_config(seed=1, split_sizes=(8, 2, 2))
data = sg.build_dataset(config)
train = data["train"]
print("labels", train.labels, "ground-truth pixels per sample", train.ground_truth.sum(axis=(1, 2)))

# One row per sample: image, then ground truth (empty for class 1)
rows = [[gray_tile(img), truth_tile(gt)] for img, gt in zip(train.images[:4], train.ground_truth[:4])]
Image.fromarray(montage_array(rows, tile_scale=3)).save(out / "synthetic_lesions.png")
print("wrote", out / "synthetic_lesions.png")
