"""
The desk-scale experiment end to end
====================================

Equivalent to ``lesionbench run-all --scale desk --seed 1``: generate the
Perlin dataset, train three runs, explain 200 lesion samples of the best
run with every method, score them and draw the figures.  Takes roughly
fifteen minutes on one CPU core; finished stages are reused on a rerun.
"""
import sys

from lesionbench.harness import preset, run_experiment

out = sys.argv[1] if len(sys.argv) > 1 else "desk-out"
report = run_experiment(preset("desk", seed=1), out, progress=print)

perlin = report.datasets["perlin"]
print("holdout accuracy per run", [round(r["holdout_accuracy"], 4) for r in perlin["runs"]])
for method, stats in perlin["metrics"].items():
    print(f"{method:20s} ROC-AUC {stats['roc_auc']['mean']:.3f}  mAP {stats['ap']['mean']:.3f}")
