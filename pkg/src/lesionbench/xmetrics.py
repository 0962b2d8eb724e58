"""Explanation performance: heatmap pixels ranked against a binary lesion mask.

Three scores per heatmap, all invariant to strictly increasing transforms of
the relevance:

* ROC-AUC, with ties counted one half (midrank formulation);
* average precision, averaged over samples to give mAP;
* precision at 99% specificity (PREC99), precision among pixels above the
  lowest threshold that lets at most 1% of negative pixels through.

AP and PREC99 order pixels by descending score, ties broken by original
pixel index (stable sort).
"""
from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

METRICS = ("roc_auc", "ap", "prec99")
TRANSFORMS = ("abs", "raw", "pos")


class UndefinedMetric(ValueError):
    """The ground truth lacks positive or negative pixels."""


class ProtocolError(ValueError):
    pass


def transform_scores(heatmap, mode="abs"):
    r = np.asarray(heatmap, dtype=np.float64)
    if mode == "abs":
        return np.abs(r)
    if mode == "raw":
        return r
    if mode == "pos":
        return np.maximum(r, 0.0)
    raise ValueError(f"unknown transform {mode!r}; expected one of {TRANSFORMS}")


@dataclass
class ScoredPixels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    @property
    def P(self):
        return int(self.labels.sum())

    @property
    def N(self):
        return int(self.labels.size - self.labels.sum())


def _pixels(scores, labels):
    if isinstance(scores, ScoredPixels):
        return scores
    return ScoredPixels(scores, labels)


def roc_auc(scores, labels=None) -> float:
    """Probability that a random positive outscores a random negative."""
    sp = _pixels(scores, labels)
    P, N = sp.P, sp.N
    if P == 0 or N == 0:
        raise UndefinedMetric(f"ROC-AUC needs both classes (P={P}, N={N})")
    ranks = rankdata(sp.scores)  # midranks for ties
    return float((ranks[sp.labels].sum() - P * (P + 1) / 2) / (P * N))


def _descending(sp):
    order = np.argsort(-sp.scores, kind="stable")
    return sp.scores[order], sp.labels[order]


def average_precision(scores, labels=None) -> float:
    """Mean of precision@k over the ranks k of the positive pixels.

    The sum is accumulated as an exact fraction, so the result is the
    correctly rounded value (5/6 comes out as ``5 / 6``).
    """
    sp = _pixels(scores, labels)
    if sp.P == 0:
        raise UndefinedMetric("average precision needs at least one positive pixel")
    _, lab = _descending(sp)
    ranks = np.flatnonzero(lab) + 1
    hits = np.arange(1, len(ranks) + 1)
    exact = sum(Fraction(int(h), int(r)) for h, r in zip(hits, ranks))
    return float(exact / sp.P)


def precision_at_specificity_detail(scores, labels=None, specificity=0.99):
    """Precision at the lowest observed threshold keeping the false-positive
    count within ``floor((1 - specificity) * N)``.

    Returns ``(precision, valid)``; ``valid`` is False (and precision 0) when
    even the highest score admits too many negatives.
    """
    sp = _pixels(scores, labels)
    if sp.N == 0:
        raise UndefinedMetric("precision at specificity needs negative pixels")
    budget = math.floor((1.0 - specificity) * sp.N + 1e-9)
    s, lab = _descending(sp)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    cum_pos = np.cumsum(lab)[ends]
    cum_neg = (ends + 1) - cum_pos
    ok = np.flatnonzero(cum_neg <= budget)
    if len(ok) == 0:
        return 0.0, False
    k = ok[-1]
    return float(cum_pos[k] / (ends[k] + 1)), True


def precision_at_specificity(scores, labels=None, specificity=0.99) -> float:
    """PREC99 by default.

    Worked example: 100 negatives scored 0.00, 0.01, ..., 0.99 and two
    positives scored 0.995 and 0.55.  The budget is floor(0.01 * 100) = 1
    false positive, so the threshold stops at 0.99: one positive and one
    negative are selected and the precision is 0.5.

    >>> neg = np.arange(100) / 100
    >>> precision_at_specificity(np.r_[neg, 0.995, 0.55], np.r_[np.zeros(100), 1, 1])
    0.5
    """
    return precision_at_specificity_detail(scores, labels, specificity)[0]


def score_heatmap(heatmap, ground_truth, mode="abs", restrict_to=None):
    """All three metrics for one heatmap. ``restrict_to`` limits the pixels scored."""
    scores = transform_scores(heatmap, mode)
    truth = np.asarray(ground_truth).astype(bool)
    if restrict_to is not None:
        keep = np.asarray(restrict_to).astype(bool)
        scores, truth = scores[keep], truth[keep]
    sp = ScoredPixels(scores, truth)
    prec, valid = precision_at_specificity_detail(sp)
    return {"roc_auc": roc_auc(sp), "ap": average_precision(sp), "prec99": prec,
            "prec99_valid": valid}


@dataclass
class MetricsReport:
    rows: list
    transform: str
    sample_count: int
    dataset: str = ""
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate_rows(self.rows)

    @property
    def methods(self):
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def values(self, method, metric):
        return np.array([r[metric] for r in self.rows if r["method"] == method])

    def header_line(self):
        return f"# transform={self.transform} protocol_size={self.sample_count}"

    def write_csv(self, path, reports=()):
        """Per-sample rows of this report followed by those of ``reports``."""
        with open(path, "w", newline="") as fh:
            fh.write(self.header_line() + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "sample_id", "method", *METRICS, "prec99_valid"])
            for rep in (self, *reports):
                for r in rep.rows:
                    w.writerow([rep.dataset, r["sample_id"], r["method"],
                                *(f"{r[m]:.17g}" for m in METRICS), int(r["prec99_valid"])])

    def summary_rows(self):
        out = []
        for method, stats in self.aggregate.items():
            row = {"dataset": self.dataset, "method": method}
            for m in METRICS:
                row[f"{m}_mean"], row[f"{m}_std"] = stats[m]
            out.append(row)
        return out

    @staticmethod
    def write_summary(path, reports):
        reports = list(reports)
        with open(path, "w", newline="") as fh:
            if reports:
                fh.write(reports[0].header_line() + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "method", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
            for rep in reports:
                for row in rep.summary_rows():
                    w.writerow([row["dataset"], row["method"],
                                *(f"{row[f'{m}_{s}']:.17g}" for m in METRICS for s in ("mean", "std"))])

    @classmethod
    def read_csv(cls, path):
        """Reports keyed by dataset name, in file order."""
        with open(path, newline="") as fh:
            head = fh.readline().lstrip("# ").split()
            meta = dict(item.split("=", 1) for item in head)
            rows = {}
            for r in csv.DictReader(fh):
                rows.setdefault(r["dataset"], []).append(
                    {"sample_id": int(r["sample_id"]), "method": r["method"],
                     **{m: float(r[m]) for m in METRICS},
                     "prec99_valid": bool(int(r["prec99_valid"]))})
        return {name: cls(rs, meta["transform"], int(meta["protocol_size"]), name)
                for name, rs in rows.items()}


def aggregate_rows(rows):
    """Per-method (mean, population std) of every metric, in first-seen order."""
    out = {}
    for method in dict.fromkeys(r["method"] for r in rows):
        vals = [r for r in rows if r["method"] == method]
        out[method] = {}
        for m in METRICS:
            xs = [float(r[m]) for r in vals]
            out[method][m] = (statistics.fmean(xs), statistics.pstdev(xs))
    return out


def evaluate_heatmaps(heatmaps, ground_truths, mode="abs", sample_ids=None, dataset="",
                      restrict_to=None) -> MetricsReport:
    """Score heatmaps of positive-class samples.

    ``heatmaps`` maps method name to an array (N, H, W) aligned with
    ``ground_truths`` (N, H, W).  ``restrict_to`` is an optional per-sample
    pixel mask (N, H, W) for mask-restricted scoring.
    """
    truths = np.asarray(ground_truths).astype(bool)
    n = len(truths)
    flat = truths.reshape(n, -1)
    if n == 0:
        raise ProtocolError("no samples to evaluate")
    if not flat.any(axis=1).all():
        raise ProtocolError("evaluation requires class-2 samples with a non-empty ground truth")
    if flat.all(axis=1).any():
        raise ProtocolError("ground truth covers the whole image; no negative pixels")
    ids = list(range(n)) if sample_ids is None else [int(s) for s in sample_ids]
    if len(ids) != n:
        raise ProtocolError("sample id count does not match ground truths")
    rows = []
    for method, maps in heatmaps.items():
        maps = np.asarray(maps)
        if len(maps) != n:
            raise ProtocolError(f"{method}: {len(maps)} heatmaps for {n} ground truths")
        for k in range(n):
            keep = None if restrict_to is None else restrict_to[k]
            rows.append({"sample_id": ids[k], "method": method,
                         **score_heatmap(maps[k], truths[k], mode, keep)})
    return MetricsReport(rows, mode, n, dataset)
