"""
Scoring a heatmap against the ground truth
==========================================

A heatmap is scored by how well its pixel ranking separates lesion pixels
from the rest.  ROC-AUC ignores class balance; average precision and
PREC99 reward heatmaps that put the few lesion pixels first.
"""
import numpy as np

from lesionbench.xmetrics import average_precision, precision_at_specificity, roc_auc, score_heatmap

# Four pixels, two of them lesion: one negative outranks one positive
labels = np.array([1, 0, 0, 1])
scores = np.array([0.9, 0.8, 0.1, 0.7])
print("AUC", roc_auc(scores, labels))            # 3 of 4 pairs ordered: 0.75
print("AP ", average_precision(scores, labels))  # (1/1 + 2/3) / 2 = 5/6

# Tied scores count one half in the AUC
print("AUC with a tie", roc_auc(np.array([0.5, 0.5]), np.array([1, 0])))

# PREC99: at most 1% of the negatives may pass the threshold
neg = np.arange(100) / 100
print("PREC99", precision_at_specificity(np.r_[neg, 0.995, 0.55], np.r_[np.zeros(100), 1, 1]))

# Imbalance: adding more background pixels leaves the AUC alone but lowers AP
rng = np.random.default_rng(0)
s = rng.random(300)
l = rng.random(300) < 0.1
s2, l2 = np.r_[s, s[~l]], np.r_[l, l[~l]]
print("AUC before/after", roc_auc(s, l), roc_auc(s2, l2))
print("AP  before/after", average_precision(s, l), average_precision(s2, l2))

# A 2-D heatmap is scored by absolute relevance by default
truth = np.zeros((16, 16), bool)
truth[4:8, 4:8] = True
heat = rng.normal(size=(16, 16)) + 3 * truth
print(score_heatmap(heat, truth))
