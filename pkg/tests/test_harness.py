import json
import re

import numpy as np
import pytest
from scipy import ndimage

from lesionbench import synthgen as sg
from lesionbench.harness import Experiment, ExperimentReport, StageError, preset, render, resolve
from lesionbench.harness.cli import main
from lesionbench.harness.config import ConfigError, read_config_file, write_config_file
from lesionbench.saliency import METHODS
from lesionbench.xmetrics import MetricsReport, evaluate_heatmaps

TINY = """
[experiment]
eval_count = 10
[dataset]
image_shape = 32,32
split_sizes = 40,20,40
perlin_grid = 1,2
lesion_diameter = 6
[model]
blocks = 2,4
dense_units = 8
[train]
max_epochs = 3
patience = 2
runs_per_dataset = 2
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def tiny_config(tiny_ini, overrides=None):
    return resolve(file_values=read_config_file(tiny_ini), overrides=overrides)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One completed tiny run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("done")
    (root / "tiny.ini").write_text(TINY)
    out = root / "out"
    assert main(["run-all", "--config", str(root / "tiny.ini"), "--out", str(out), "-q"]) == 0
    return root, out


class TestConfig:
    def test_presets(self):
        paper, desk = preset("paper"), preset("desk")
        assert paper.split_sizes == (42_000, 6_000, 12_000) and paper.image_shape == (140, 192)
        assert paper.hyperparams.learning_rate == 5e-5 and paper.hyperparams.optimizer == "sgd"
        assert paper.blocks == (32, 64, 128, 256)
        assert desk.split_sizes == (2000, 500, 1000) and desk.image_shape == (64, 64)
        assert len(desk.blocks) == 2 and desk.hyperparams.max_epochs == 60
        assert desk.methods == METHODS and desk.eval_count == 200

    def test_layering(self, tiny_ini):
        cfg = tiny_config(tiny_ini)
        assert cfg.image_shape == (32, 32) and cfg.hyperparams.max_epochs == 3
        assert cfg.hyperparams.optimizer == "adam"  # from the desk preset
        cfg = tiny_config(tiny_ini, {("train", "max_epochs"): 5, ("experiment", "methods"): ("lrp_z",)})
        assert cfg.hyperparams.max_epochs == 5 and cfg.methods == ("lrp_z",)

    def test_scale_from_file_selects_preset(self, tmp_path):
        (tmp_path / "p.ini").write_text("[experiment]\nscale = paper\n")
        assert resolve(file_values=read_config_file(tmp_path / "p.ini")).split_sizes[0] == 42_000

    def test_roundtrip(self, tiny_ini, tmp_path):
        cfg = tiny_config(tiny_ini)
        write_config_file(cfg, tmp_path / "back.ini")
        assert resolve(file_values=read_config_file(tmp_path / "back.ini")) == cfg

    @pytest.mark.parametrize("text", ["[train]\nwarp = 9\n", "[experiment]\nmethods = occlusion\n",
                                      "[dataset]\nimage_shape = a,b\n", "[experiment]\nconditions = file\n"])
    def test_invalid(self, tmp_path, text):
        (tmp_path / "bad.ini").write_text(text)
        with pytest.raises(ConfigError):
            resolve(file_values=read_config_file(tmp_path / "bad.ini"))

    def test_paired_dataset_configs(self):
        cfg = preset("desk")
        import dataclasses

        cfg = dataclasses.replace(cfg, conditions=("perlin", "file"), archive="/some/dir")
        dcs = cfg.dataset_configs()
        assert dcs["file"].background_kind == "file"
        assert dcs["perlin"].mask_source == "archive"
        assert dcs["perlin"].master_seed == dcs["file"].master_seed


class TestCli:
    def test_help_documents_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run-all", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--seed", "--scale", "--out", "--methods", "--transform", "--config",
                     "--train-learning-rate", "--dataset-split-sizes", "--model-blocks"):
            assert flag in text

    @pytest.mark.parametrize("argv", [["explode"], ["train", "--frobnicate"], ["train", "--scale", "huge"]])
    def test_usage_errors(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_paper_generate_plan(self, capsys):
        assert main(["generate", "--scale", "paper", "--dry-run"]) == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["datasets"]["perlin"]["splits"] == {"train": 42000, "val": 6000, "holdout": 12000}

    def test_stage_dependency(self, tiny_ini, tmp_path, capsys):
        assert main(["evaluate", "--config", str(tiny_ini), "--out", str(tmp_path / "o")]) == 1
        assert "evaluate" in capsys.readouterr().err
        assert main(["generate", "--config", str(tiny_ini), "--out", str(tmp_path / "o"), "-q"]) == 0
        assert main(["explain", "--config", str(tiny_ini), "--out", str(tmp_path / "o"), "-q"]) == 1

    def test_stagewise_equals_run_all(self, finished, tmp_path):
        root, done = finished
        out = tmp_path / "o"
        for stage in ("generate", "train", "explain", "evaluate", "report"):
            assert main([stage, "--config", str(root / "tiny.ini"), "--out", str(out), "-q"]) == 0
        assert (out / "report.json").read_bytes() == (done / "report.json").read_bytes()


class TestPipeline:
    def test_outputs_and_inventory(self, finished):
        _, out = finished
        for rel in ("dataset/perlin/manifest.json", "runs/perlin/0/checkpoint", "runs/perlin/1/history.csv",
                    "heatmaps/perlin/gradient/heatmaps.ten", "metrics.csv", "summary.csv",
                    "figures/montage.png", "figures/boxplots.svg"):
            assert (out / rel).exists(), rel
        report = ExperimentReport.load(out / "report.json")
        assert report.verify(out) == []
        assert "figures/montage.png" in report.inventory
        ds = report.datasets["perlin"]
        assert ds["eval_sample_count"] == 10 and len(ds["runs"]) == 2
        assert ds["best_run"] == int(np.argmax([r["holdout_accuracy"] for r in ds["runs"]]))
        assert not re.search(r"20\d\d-\d\d-\d\d", (out / "report.json").read_text())

    def test_resume_skips_training(self, finished, tiny_ini, capsys):
        _, out = finished
        before = (out / "report.json").read_bytes()
        ckpt = (out / "runs/perlin/0/checkpoint").stat().st_mtime_ns
        assert main(["run-all", "--config", str(tiny_ini), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "run 0: up to date" in text and "epoch" not in text
        assert (out / "runs/perlin/0/checkpoint").stat().st_mtime_ns == ckpt
        assert (out / "report.json").read_bytes() == before

    def test_tampered_output_is_rebuilt(self, tiny_ini, tmp_path):
        cfg = tiny_config(tiny_ini, {("train", "runs_per_dataset"): 1,
                                       ("experiment", "methods"): ("gradient",)})
        exp = Experiment(cfg, tmp_path / "o")
        exp.run_all()
        good = (tmp_path / "o/runs/perlin/0/checkpoint").read_bytes()
        (tmp_path / "o/runs/perlin/0/checkpoint").write_bytes(b"junk")
        with pytest.raises(StageError, match="train"):
            exp.explain()
        exp.train()
        assert (tmp_path / "o/runs/perlin/0/checkpoint").read_bytes() == good

    def test_protocol_row_count(self, tiny_ini, tmp_path):
        cfg = tiny_config(tiny_ini, {("train", "runs_per_dataset"): 1,
                                       ("experiment", "methods"): ("gradient",)})
        Experiment(cfg, tmp_path / "o").run_all()
        reports = MetricsReport.read_csv(tmp_path / "o/metrics.csv")
        assert len(reports["perlin"].rows) == 10

    def test_eval_samples_are_first_class2_holdout(self, finished, tiny_ini):
        _, out = finished
        hold = sg.load_dataset(out / "dataset/perlin")["holdout"]
        ids = json.loads((out / "heatmaps/perlin/gradient/heatmaps.json").read_text())["sample_ids"]
        assert ids == [int(i) for i in np.flatnonzero(hold.labels == 2)[:10]]
        rnd = Experiment(tiny_config(tiny_ini, {("experiment", "selection"): "random"}), out)
        picked = rnd.eval_ids(hold.labels)
        assert picked == rnd.eval_ids(hold.labels) and all(hold.labels[i] == 2 for i in picked)

    def test_paired_conditions(self, tiny_ini, tmp_path):
        rng = np.random.default_rng(0)
        images = [ndimage.gaussian_filter(rng.random((32, 32)), 2) for _ in range(6)]
        masks = [sg.ellipse_mask((32, 32), (15.5, 15.5), (14, 15)) for _ in range(6)]
        sg.write_background_archive(tmp_path / "arch", images, masks)
        cfg = tiny_config(tiny_ini, {("experiment", "conditions"): ("perlin", "file"),
                                       ("experiment", "archive"): str(tmp_path / "arch"),
                                       ("train", "runs_per_dataset"): 1,
                                       ("experiment", "methods"): ("gradient", "lrp_z")})
        report = Experiment(cfg, tmp_path / "o").run_all()
        for split in sg.SPLITS:
            a = (tmp_path / f"o/dataset/perlin/{split}_ground_truth.ten").read_bytes()
            assert a == (tmp_path / f"o/dataset/file/{split}_ground_truth.ten").read_bytes()
        assert sorted(report.datasets) == ["file", "perlin"]
        from PIL import Image

        # 2 conditions x 2 classes, input + truth + 2 methods, tiles of 32 px doubled
        assert Image.open(tmp_path / "o/figures/montage.png").size == (4 * 64, 4 * 64)


class TestRender:
    def samples(self, n_rows=4, n_methods=8, shape=(16, 16)):
        rng = np.random.default_rng(0)
        out = []
        for k in range(n_rows):
            gt = np.zeros(shape, bool)
            if k % 2:
                gt[2:5, 3:6] = True
            out.append({"image": rng.random(shape), "ground_truth": gt,
                        "heatmaps": {f"m{j}": rng.normal(size=shape) for j in range(n_methods)}})
        return out

    def test_montage_layout_and_determinism(self, tmp_path):
        from PIL import Image

        hw = render.render_montage(tmp_path / "a.png", self.samples(), tile_scale=2)
        assert hw == (4 * 16 * 2, 10 * 16 * 2)
        assert Image.open(tmp_path / "a.png").size == (10 * 32, 4 * 32)
        render.render_montage(tmp_path / "b.png", self.samples(), tile_scale=2)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_class1_truth_tile_is_background(self, tmp_path):
        from PIL import Image

        render.render_montage(tmp_path / "a.png", self.samples(), tile_scale=1)
        arr = np.asarray(Image.open(tmp_path / "a.png"))
        assert not arr[0:16, 16:32].any()  # row 0 is class 1
        assert arr[16:32, 16:32].any()

    def test_diverging_scale(self):
        tile = render.heatmap_tile(np.array([[-2.0, 0.0, 2.0]]))
        assert tuple(tile[0, 1]) == tuple(render._diverging_lut()[128])
        assert tile[0, 2, 0] > tile[0, 2, 2] and tile[0, 0, 2] > tile[0, 0, 0]  # red vs blue

    def test_empty_montage(self, tmp_path):
        with pytest.raises(render.RenderError):
            render.render_montage(tmp_path / "a.png", [])

    def report(self, constant=False):
        truth = np.zeros((12, 8, 8), bool)
        truth[:, 1:3, 1:3] = True
        rng = np.random.default_rng(1)
        maps = {"gradient": np.repeat(rng.random((1, 8, 8)), 12, axis=0) if constant else rng.random((12, 8, 8)),
                "lrp_z": rng.random((12, 8, 8))}
        return evaluate_heatmaps(maps, truth, dataset="perlin")

    def test_boxplots(self, tmp_path):
        rep = self.report()
        stats = render.render_boxplots(tmp_path / "b.svg", {"perlin": rep})
        svg = (tmp_path / "b.svg").read_text()
        assert svg.count('<g id="axes_') == 3
        for method in rep.methods:
            for metric in ("roc_auc", "ap", "prec99"):
                assert stats["perlin"][method][metric]["med"] == np.median(rep.values(method, metric))
        render.render_boxplots(tmp_path / "c.svg", {"perlin": rep})
        assert (tmp_path / "b.svg").read_bytes() == (tmp_path / "c.svg").read_bytes()

    def test_boxplot_medians_from_csv(self, finished):
        _, out = finished
        reports = MetricsReport.read_csv(out / "metrics.csv")
        medians = ExperimentReport.load(out / "report.json").datasets["perlin"]["boxplot_medians"]
        for method, per_metric in medians.items():
            for metric, med in per_metric.items():
                assert med == pytest.approx(np.median(reports["perlin"].values(method, metric)), abs=1e-15)

    def test_constant_values(self, tmp_path):
        stats = render.render_boxplots(tmp_path / "b.svg", {"perlin": self.report(constant=True)})
        s = stats["perlin"]["gradient"]["roc_auc"]
        assert s["q1"] == s["q3"] == s["med"]

    def test_insufficient_samples(self, tmp_path):
        truth = np.zeros((3, 8, 8), bool)
        truth[:, 0, 0] = True
        rep = evaluate_heatmaps({"g": np.random.default_rng(0).random((3, 8, 8))}, truth)
        with pytest.raises(render.RenderError):
            render.render_boxplots(tmp_path / "b.svg", {"x": rep})
