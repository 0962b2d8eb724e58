"""Experiment configuration: scale presets, INI files and flag overrides.

A configuration is resolved in three layers: the scale preset, then an
optional INI file, then command-line overrides.  Every INI key has a flag
``--<section>-<key>`` (underscores become dashes).

Example file::

    [experiment]
    scale = desk
    seed = 1
    methods = gradient, lrp_z

    [train]
    max_epochs = 40
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ..saliency import METHODS
from ..synthgen import DatasetConfig, LesionSpec
from ..trainer import OPTIMIZERS, Hyperparams
from ..xmetrics import TRANSFORMS

SCALES = ("desk", "paper")
CONDITIONS = ("perlin", "file")
SELECTIONS = ("first", "random")


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(v) for v in str(text).replace("x", ",").split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _optional_str(text):
    text = str(text).strip()
    return text or None


# (section, key) -> (parser, help)
SCHEMA = {
    ("experiment", "scale"): (str, f"size preset, one of {SCALES}"),
    ("experiment", "seed"): (int, "master seed for data, initialization and shuffling"),
    ("experiment", "conditions"): (_names, "background conditions to run (perlin, file)"),
    ("experiment", "archive"): (_optional_str, "background archive directory (PNG + *_mask.png)"),
    ("experiment", "methods"): (_names, "comma-separated saliency methods"),
    ("experiment", "eval_count"): (int, "class-2 holdout samples explained and scored"),
    ("experiment", "transform"): (str, f"heatmap score transform, one of {TRANSFORMS}"),
    ("experiment", "selection"): (str, "evaluation sample rule: first (stored order) or random"),
    ("dataset", "image_shape"): (_ints, "image rows,cols"),
    ("dataset", "split_sizes"): (_ints, "train,val,holdout sample counts"),
    ("dataset", "perlin_grid"): (_ints, "Perlin lattice cells rows,cols"),
    ("dataset", "lesion_diameter"): (float, "lesion diameter in pixels"),
    ("dataset", "lesion_intensity"): (float, "maximum multiplicative lesion attenuation"),
    ("dataset", "lesion_count"): (int, "lesions per class-2 image"),
    ("model", "blocks"): (_ints, "filters per conv block"),
    ("model", "dense_units"): (int, "hidden dense units"),
    ("train", "optimizer"): (str, f"one of {OPTIMIZERS}"),
    ("train", "learning_rate"): (float, "step size"),
    ("train", "momentum"): (float, "momentum (first-moment decay for adam)"),
    ("train", "batch_size_train"): (int, "training batch size"),
    ("train", "batch_size_eval"): (int, "evaluation batch size"),
    ("train", "max_epochs"): (int, "epoch limit"),
    ("train", "loss_stop_threshold"): (float, "stop once the epoch-mean training loss is below this"),
    ("train", "patience"): (int, "early-stopping patience in epochs"),
    ("train", "min_delta"): (float, "minimum validation-loss improvement"),
    ("train", "runs_per_dataset"): (int, "independent training runs per condition"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    scale: str = "desk"
    seed: int = 1
    conditions: tuple = ("perlin",)
    archive: str | None = None
    methods: tuple = METHODS
    eval_count: int = 200
    transform: str = "abs"
    selection: str = "first"
    image_shape: tuple = (64, 64)
    split_sizes: tuple = (2000, 500, 1000)
    perlin_grid: tuple = (2, 3)
    lesion: LesionSpec = field(default_factory=LesionSpec)
    blocks: tuple = (8, 16)
    dense_units: int = 128
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}")
        if not self.methods:
            raise ConfigError("at least one saliency method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
        if not self.conditions or any(c not in CONDITIONS for c in self.conditions):
            raise ConfigError(f"conditions must be a nonempty subset of {CONDITIONS}")
        if "file" in self.conditions and not self.archive:
            raise ConfigError("the file condition needs an archive directory")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        if self.eval_count < 1:
            raise ConfigError("eval_count must be positive")
        if not self.blocks:
            raise ConfigError("the model needs at least one conv block")

    def dataset_configs(self):
        """One DatasetConfig per condition.

        Both conditions share the master seed, so lesion placement and ground
        truth agree sample for sample; with an archive the Perlin condition
        also borrows the archive masks.
        """
        common = dict(image_shape=self.image_shape, split_sizes=self.split_sizes,
                      perlin_grid=self.perlin_grid, lesion=self.lesion, master_seed=self.seed)
        out = {}
        for cond in self.conditions:
            if cond == "file":
                out[cond] = DatasetConfig(background_kind="file", archive=self.archive, **common)
            elif self.archive:
                out[cond] = DatasetConfig(mask_source="archive", archive=self.archive, **common)
            else:
                out[cond] = DatasetConfig(**common)
        return out

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        d["hyperparams"] = self.hyperparams.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lesion"] = LesionSpec(**d["lesion"])
        d["hyperparams"] = Hyperparams(**d["hyperparams"])
        for key in ("conditions", "methods", "image_shape", "split_sizes", "perlin_grid", "blocks"):
            d[key] = tuple(d[key])
        return cls(**d)

    def digest(self, *keys):
        """Short hash of selected fields (all fields when none are named)."""
        d = self.to_dict()
        if keys:
            d = {k: d[k] for k in keys}
        return stable_hash(d)


def stable_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def desk_hyperparams(**overrides):
    """Short-budget schedule: Adam, batch 32, at most 60 epochs."""
    base = dict(optimizer="adam", learning_rate=1e-3, batch_size_train=32, max_epochs=60)
    base.update(overrides)
    return Hyperparams(**base)


def preset(scale="desk", seed=1):
    if scale == "paper":
        return ExperimentConfig(scale="paper", seed=seed, image_shape=(140, 192),
                                split_sizes=(42_000, 6_000, 12_000), perlin_grid=(5, 8),
                                blocks=(32, 64, 128, 256), hyperparams=Hyperparams())
    if scale == "desk":
        return ExperimentConfig(scale="desk", seed=seed, hyperparams=desk_hyperparams())
    raise ConfigError(f"scale must be one of {SCALES}")


def _apply(config, values):
    """Apply {(section, key): parsed value} overrides to a config."""
    top, lesion, hp = {}, {}, {}
    for (section, key), value in values.items():
        if section == "train":
            hp[key] = value
        elif section == "dataset" and key.startswith("lesion_"):
            lesion[key[len("lesion_"):]] = value
        elif section != "experiment" or key != "scale":
            top[key] = value
    try:
        if lesion:
            top["lesion"] = dataclasses.replace(config.lesion, **lesion)
        if hp:
            top["hyperparams"] = dataclasses.replace(config.hyperparams, **hp)
        return dataclasses.replace(config, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_value(section, key, text):
    try:
        parser, _ = SCHEMA[section, key]
    except KeyError:
        raise ConfigError(f"unknown configuration key [{section}] {key}") from None
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def read_config_file(path):
    """Parse an INI file into {(section, key): value}."""
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    values = {}
    for section in cp.sections():
        for key, text in cp[section].items():
            values[section, key] = parse_value(section, key, text)
    return values


def resolve(scale=None, seed=None, file_values=None, overrides=None):
    """Preset for the effective scale, then file values, then overrides."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    merged = {**file_values, **overrides}
    if scale is not None:
        merged["experiment", "scale"] = scale
    if seed is not None:
        merged["experiment", "seed"] = seed
    scale = merged.get(("experiment", "scale"), "desk")
    config = preset(scale, merged.get(("experiment", "seed"), 1))
    return _apply(config, merged)


def write_config_file(config: ExperimentConfig, path):
    """Write the resolved configuration as an INI file."""
    d = config.to_dict()
    cp = configparser.ConfigParser(interpolation=None)
    for section, key in SCHEMA:
        if section not in cp:
            cp[section] = {}
        if section == "train":
            value = d["hyperparams"][key]
        elif key.startswith("lesion_"):
            value = d["lesion"][key[len("lesion_"):]]
        else:
            value = d[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        cp[section][key] = "" if value is None else str(value)
    with open(path, "w") as fh:
        cp.write(fh)
