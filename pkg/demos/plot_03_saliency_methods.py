"""
Saliency methods on a small network
===================================

All eight methods share one backward pass over the recorded activations;
they differ only in the rule applied at linear layers and at ReLUs.
"""
import sys
from pathlib import Path

import numpy as np

from lesionbench import synthgen as sg
from lesionbench.harness.render import render_montage
from lesionbench.netcore import NetworkModel
from lesionbench.saliency import METHODS, MethodSpec, estimate_patterns, explain_batch

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output")
out.mkdir(exist_ok=True)

data = sg.build_dataset(sg.desk_config(seed=2, split_sizes=(40, 2, 2)))
images = data["train"].images
model = NetworkModel.build((64, 64), blocks=(4, 8), dense_units=16, seed=0, dtype=np.float64, bias=False)

# LRP redistributes the target logit: the relevance sums back to it
x = images[data["train"].labels == 2][:1]
logit = model.logits(x)[0, 1]
for method in ("lrp_z", "lrp_alpha_beta", "deep_taylor"):
    r = explain_batch(model, x, MethodSpec(method, epsilon=1e-9), 1)
    print(f"{method:15s} sum {r.sum():+.6f}  logit {logit:+.6f}")

# The pattern methods need signal directions estimated from data
patterns = estimate_patterns(model, images)
heatmaps = {m: explain_batch(model, x, m, 1, patterns)[0] for m in METHODS}
sample = {"image": x[0], "ground_truth": data["train"].ground_truth[data["train"].labels == 2][0],
          "heatmaps": heatmaps}
print("montage size", render_montage(out / "methods.png", [sample], tile_scale=2))
