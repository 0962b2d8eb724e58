"""End-to-end experiment: generate, train, explain, evaluate, report.

Output tree under ``out``::

    dataset/<condition>/        manifest.json + TEN1 tensors
    runs/<condition>/<k>/       checkpoint, history.csv
    runs/<condition>/selection.json
    heatmaps/<condition>/<method>/heatmaps.ten (+ .json sidecar)
    metrics.csv, summary.csv, report.json
    figures/montage.png, figures/boxplots.svg

Each completed stage directory holds a ``.stage.json`` marker with the hash
of the stage inputs and the SHA-256 of every output file.  A stage is skipped
when its marker matches the current inputs and all files still verify.
Markers also record wall-clock seconds; they are kept out of report.json so
the report stays byte-reproducible.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import rng as _rng
from ..netcore import NetworkModel
from ..saliency import PATTERN_METHODS, PatternSet, estimate_patterns, explain_batch, load_heatmaps, save_heatmaps
from ..synthgen import build_dataset, load_dataset
from ..trainer import TrainHistory, evaluate, summarize_accuracies, train
from ..xmetrics import MetricsReport, evaluate_heatmaps
from . import render
from .config import ExperimentConfig, stable_hash

log = logging.getLogger(__name__)

MARKER = ".stage.json"
REPORT_VERSION = 1
TARGET_INDEX = 1  # output index of class 2, the lesion class

NOTES = [
    "best run selected on holdout accuracy",
    "early stopping requires a validation-loss improvement of at least min_delta",
    "loss threshold applies to the epoch-mean training loss",
    "early stopping monitors validation loss and restores the best weights",
    "explanations target class 2 and start at the pre-softmax logit",
    "evaluation uses class-2 holdout samples",
]


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def _files(directory):
    return sorted(p for p in Path(directory).rglob("*") if p.is_file() and p.name != MARKER)


def write_marker(directory, stage, key, extra=None):
    directory = Path(directory)
    files = {p.relative_to(directory).as_posix(): sha256_file(p) for p in _files(directory)}
    marker = {"stage": stage, "key": key, "files": files, **(extra or {})}
    (directory / MARKER).write_text(json.dumps(marker, indent=1, sort_keys=True) + "\n")
    return marker


def read_marker(directory, key=None):
    """The marker if it exists, matches ``key`` and every file verifies; else None."""
    path = Path(directory) / MARKER
    if not path.exists():
        return None
    marker = json.loads(path.read_text())
    if key is not None and marker.get("key") != key:
        return None
    for rel, digest in marker["files"].items():
        f = Path(directory) / rel
        if not f.exists() or sha256_file(f) != digest:
            return None
    return marker


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentReport:
    config: dict
    datasets: dict
    inventory: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: list(NOTES))

    def to_dict(self):
        return {"format_version": REPORT_VERSION, "config": self.config, "datasets": self.datasets,
                "notes": self.notes, "inventory": self.inventory}

    def write(self, path):
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["config"], d["datasets"], d["inventory"], d["notes"])

    def verify(self, root):
        """Paths whose content no longer matches the inventory."""
        root = Path(root)
        return [rel for rel, digest in self.inventory.items()
                if not (root / rel).exists() or sha256_file(root / rel) != digest]


class Experiment:
    """Stage runner bound to a configuration and an output directory."""

    def __init__(self, config: ExperimentConfig, out, progress=None):
        self.config = config
        self.out = Path(out)
        self.progress = progress or (lambda msg: log.info("%s", msg))

    # -- paths -------------------------------------------------------------
    def dataset_dir(self, cond):
        return self.out / "dataset" / cond

    def run_dir(self, cond, k):
        return self.out / "runs" / cond / str(k)

    def selection_path(self, cond):
        return self.out / "runs" / cond / "selection.json"

    def heatmap_dir(self, cond):
        return self.out / "heatmaps" / cond

    # -- keys --------------------------------------------------------------
    def _archive_hash(self):
        if not self.config.archive:
            return None
        return stable_hash({p.name: sha256_file(p) for p in sorted(Path(self.config.archive).glob("*.png"))})

    def dataset_key(self, cond):
        dc = self.config.dataset_configs()[cond]
        return stable_hash({"dataset": dc.to_dict(), "archive": self._archive_hash()})

    def run_key(self, cond, k):
        c = self.config
        return stable_hash({"dataset": self.dataset_key(cond), "blocks": list(c.blocks),
                            "dense_units": c.dense_units, "hp": c.hyperparams.to_dict(),
                            "seed": c.seed, "run": k})

    def _require(self, stage, directory, key, hint):
        marker = read_marker(directory, key)
        if marker is None:
            raise StageError(stage, f"missing or stale {directory.relative_to(self.out)}; run `{hint}` first")
        return marker

    # -- stages ------------------------------------------------------------
    def generate(self):
        for cond, dc in self.config.dataset_configs().items():
            d, key = self.dataset_dir(cond), self.dataset_key(cond)
            if read_marker(d, key):
                self.progress(f"generate {cond}: up to date")
                continue
            self.progress(f"generate {cond}: {dc.split_sizes} samples of {dc.image_shape}")
            start = time.perf_counter()
            try:
                build_dataset(dc, d)
            except ValueError as exc:
                raise StageError("generate", f"{cond}: {exc}") from exc
            write_marker(d, "generate", key, {"seconds": time.perf_counter() - start})

    def _load(self, stage, cond):
        self._require(stage, self.dataset_dir(cond), self.dataset_key(cond), "generate")
        return load_dataset(self.dataset_dir(cond))

    def train(self):
        c = self.config
        for cond in c.conditions:
            ds = self._load("train", cond)
            accs = []
            for k in range(c.hyperparams.runs_per_dataset):
                d, key = self.run_dir(cond, k), self.run_key(cond, k)
                if read_marker(d, key):
                    model = NetworkModel.load(d / "checkpoint")
                    self.progress(f"train {cond} run {k}: up to date")
                else:
                    model = NetworkModel.build(c.image_shape, c.blocks, c.dense_units,
                                               seed=_rng.derive_seed(c.seed, "run", k, "init"))
                    d.mkdir(parents=True, exist_ok=True)
                    start = time.perf_counter()
                    report = lambda e, tl, vl, va, k=k: self.progress(
                        f"train {cond} run {k} epoch {e}: loss {tl:.4f} val {vl:.4f} acc {va:.4f}")
                    model, hist = train(model, ds, c.hyperparams,
                                        seed=_rng.derive_seed(c.seed, "run", k, "shuffle"),
                                        on_epoch=report)
                    model.save(d / "checkpoint")
                    hist.write_csv(d / "history.csv")
                    write_marker(d, "train", key, {"stop_reason": hist.stop_reason,
                                                   "best_epoch": hist.best_epoch,
                                                   "seconds": time.perf_counter() - start})
                hold = ds["holdout"]
                accs.append(evaluate(model, hold.images, hold.labels, c.hyperparams.batch_size_eval)[1])
            best, mean, std = summarize_accuracies(accs)
            _write_json(self.selection_path(cond), {
                "holdout_accuracy": accs, "mean": mean, "std": std, "best_run": best,
                "run_keys": [self.run_key(cond, k) for k in range(len(accs))]})
            self.progress(f"train {cond}: holdout accuracy {mean:.4f} +/- {std:.4f}, best run {best}")

    def selection(self, stage, cond):
        path = self.selection_path(cond)
        keys = [self.run_key(cond, k) for k in range(self.config.hyperparams.runs_per_dataset)]
        if not path.exists():
            raise StageError(stage, f"no trained runs for {cond}; run `train` first")
        sel = json.loads(path.read_text())
        if sel["run_keys"] != keys:
            raise StageError(stage, f"trained runs for {cond} do not match the configuration; run `train`")
        for k, key in enumerate(keys):
            self._require(stage, self.run_dir(cond, k), key, "train")
        return sel

    def best_model(self, stage, cond):
        sel = self.selection(stage, cond)
        d = self.run_dir(cond, sel["best_run"])
        return NetworkModel.load(d / "checkpoint"), sha256_file(d / "checkpoint")

    def eval_ids(self, holdout_labels):
        c = self.config
        pool = np.flatnonzero(np.asarray(holdout_labels) == 2)
        if len(pool) < c.eval_count:
            raise StageError("explain", f"only {len(pool)} class-2 holdout samples for eval_count {c.eval_count}")
        if c.selection == "random":
            pick = _rng.generator(_rng.derive_seed(c.seed, "eval")).choice(len(pool), c.eval_count, replace=False)
            return [int(i) for i in np.sort(pool[pick])]
        return [int(i) for i in pool[:c.eval_count]]

    def explain_key(self, cond, ckpt_hash):
        c = self.config
        return stable_hash({"dataset": self.dataset_key(cond), "checkpoint": ckpt_hash,
                            "methods": list(c.methods), "eval_count": c.eval_count,
                            "selection": c.selection, "seed": c.seed})

    def patterns(self, cond, model, ds):
        """Patterns for ``model``, estimated on the training split and cached."""
        path = self.heatmap_dir(cond) / "patterns.bin"
        if path.exists():
            return PatternSet.load(path)
        batch = 32 if np.prod(self.config.image_shape) <= 64 * 64 else 4
        self.progress(f"explain {cond}: estimating patterns on {len(ds['train'].labels)} samples")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            pats = estimate_patterns(model, ds["train"].images, batch_size=batch)
        for w in caught:
            self.progress(f"explain {cond}: {w.message}")
        path.parent.mkdir(parents=True, exist_ok=True)
        pats.save(path)
        return PatternSet.load(path)  # use the stored precision

    def explain(self):
        c = self.config
        for cond in c.conditions:
            ds = self._load("explain", cond)
            model, ckpt = self.best_model("explain", cond)
            d, key = self.heatmap_dir(cond), self.explain_key(cond, ckpt)
            if read_marker(d, key):
                self.progress(f"explain {cond}: up to date")
                continue
            if d.exists():
                for f in _files(d):
                    f.unlink()
            ids = self.eval_ids(ds["holdout"].labels)
            images = np.asarray(ds["holdout"].images[ids])
            pats = self.patterns(cond, model, ds) if set(c.methods) & set(PATTERN_METHODS) else None
            for method in c.methods:
                self.progress(f"explain {cond}: {method} on {len(ids)} samples")
                rel = explain_batch(model, images, method, TARGET_INDEX, pats)
                save_heatmaps(d / method, rel, method, 2, ids)
            write_marker(d, "explain", key, {"sample_ids": ids})

    def _heatmaps_marker(self, stage, cond):
        model, ckpt = self.best_model(stage, cond)
        return self._require(stage, self.heatmap_dir(cond), self.explain_key(cond, ckpt), "explain")

    def evaluate(self):
        c = self.config
        reports = []
        for cond in c.conditions:
            marker = self._heatmaps_marker("evaluate", cond)
            ds = self._load("evaluate", cond)
            ids = marker["sample_ids"]
            truths = np.asarray(ds["holdout"].ground_truth[ids])
            maps = {}
            for method in c.methods:
                hms = load_heatmaps(self.heatmap_dir(cond) / method)
                maps[method] = np.stack([h.relevance for h in hms])
            reports.append(evaluate_heatmaps(maps, truths, c.transform, ids, dataset=cond))
            self.progress(f"evaluate {cond}: " + ", ".join(
                f"{m} AUC {reports[-1].aggregate[m]['roc_auc'][0]:.3f}" for m in c.methods))
        reports[0].write_csv(self.out / "metrics.csv", reports[1:])
        MetricsReport.write_summary(self.out / "summary.csv", reports)
        return reports

    def montage_rows(self, stage="report"):
        rows = []
        for cond in self.config.conditions:
            ds = self._load(stage, cond)
            model, _ = self.best_model(stage, cond)
            hold = ds["holdout"]
            marker = self._heatmaps_marker(stage, cond)
            pats = None
            if set(self.config.methods) & set(PATTERN_METHODS):
                pats = PatternSet.load(self.heatmap_dir(cond) / "patterns.bin")
            first1 = int(np.flatnonzero(np.asarray(hold.labels) == 1)[0])
            first2 = marker["sample_ids"][0]
            for idx, label in ((first1, 1), (first2, 2)):
                image = np.asarray(hold.images[idx])
                maps = {m: explain_batch(model, image[None], m, label - 1, pats)[0]
                        for m in self.config.methods}
                rows.append({"image": image, "ground_truth": np.asarray(hold.ground_truth[idx]),
                             "heatmaps": maps, "condition": cond, "label": label, "sample_id": idx})
        return rows

    def report(self):
        c = self.config
        for cond in c.conditions:
            self._heatmaps_marker("report", cond)
        metrics_path = self.out / "metrics.csv"
        if not metrics_path.exists():
            raise StageError("report", "metrics.csv missing; run `evaluate` first")
        reports = MetricsReport.read_csv(metrics_path)
        if sorted(reports) != sorted(c.conditions) or any(
                r.methods != list(c.methods) or r.transform != c.transform for r in reports.values()):
            raise StageError("report", "metrics.csv does not match the configuration; run `evaluate`")
        figures = self.out / "figures"
        figures.mkdir(parents=True, exist_ok=True)
        render.render_montage(figures / "montage.png", self.montage_rows())
        box = render.render_boxplots(figures / "boxplots.svg", {n: reports[n] for n in c.conditions})

        datasets = {}
        for cond in c.conditions:
            sel = self.selection("report", cond)
            runs = []
            for k in range(len(sel["holdout_accuracy"])):
                marker = read_marker(self.run_dir(cond, k))
                runs.append({"run": k, "holdout_accuracy": sel["holdout_accuracy"][k],
                             "stop_reason": marker["stop_reason"], "best_epoch": marker["best_epoch"],
                             "epochs": TrainHistory.read_csv(self.run_dir(cond, k) / "history.csv").epochs})
            rep = reports[cond]
            datasets[cond] = {
                "holdout_accuracy_mean": sel["mean"], "holdout_accuracy_std": sel["std"],
                "best_run": sel["best_run"], "runs": runs,
                "eval_sample_count": rep.sample_count,
                "metrics": {m: {k: {"mean": v[0], "std": v[1]} for k, v in stats.items()}
                            for m, stats in rep.aggregate.items()},
                "boxplot_medians": {m: {k: s["med"] for k, s in v.items()} for m, v in box[cond].items()},
            }
        inventory = {p.relative_to(self.out).as_posix(): sha256_file(p)
                     for p in _files(self.out) if p.name != "report.json"}
        report = ExperimentReport(c.to_dict(), datasets, inventory)
        report.write(self.out / "report.json")
        self.progress(f"report: {self.out / 'report.json'}")
        return report

    def run_all(self):
        self.generate()
        self.train()
        self.explain()
        self.evaluate()
        return self.report()


def run_experiment(config: ExperimentConfig, out, progress=None) -> ExperimentReport:
    """Run (or resume) every stage and return the report."""
    return Experiment(config, out, progress).run_all()
