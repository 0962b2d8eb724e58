"""Synthetic lesion datasets over Perlin-noise or file-loaded backgrounds.

A sample is ``background * lesion_map * mask``.  Class 1 samples carry no
lesions; class 2 samples carry ``LesionSpec.count`` darkening discs with a
radial Hamming profile, placed inside the top half of the brain mask.  The
binary ground truth is the support of the lesion map (pixels with a factor
below one).

Everything is a pure function of the configuration: each sample draws its
lesion and background from its own derived seed (see :mod:`lesionbench.rng`),
so datasets regenerate byte-for-byte and samples can be built in any order.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng as _rng
from .tensorio import load_tensor, open_tensor_for_write

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "holdout")
ROLES = ("images", "labels", "ground_truth")
MAX_PLACEMENT_ATTEMPTS = 10_000
# Semi-axis fraction giving an ellipse over ~60% of the raster: pi*k^2/4 = 0.6.
_ELLIPSE_FRACTION = float(np.sqrt(0.6 * 4 / np.pi))


class ConfigurationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    diameter: float = 10.0
    intensity: float = 0.3
    count: int = 2

    def __post_init__(self):
        if not 0 < self.intensity < 1:
            raise ConfigurationError("lesion intensity must lie in (0, 1)")
        if self.diameter < 3:
            raise ConfigurationError("lesion diameter must be at least 3 pixels")
        if self.count < 0:
            raise ConfigurationError("lesion count must be non-negative")

    @property
    def radius(self) -> float:
        return self.diameter / 2


@dataclass(frozen=True)
class DatasetConfig:
    background_kind: str = "perlin"
    perlin_grid: tuple = (5, 8)
    image_shape: tuple = (140, 192)
    split_sizes: tuple = (42_000, 6_000, 12_000)
    lesion: LesionSpec = field(default_factory=LesionSpec)
    master_seed: int = 0
    archive: str | None = None
    # "ellipse" for the generated silhouette, "archive" to reuse archive masks
    mask_source: str = "ellipse"

    def __post_init__(self):
        if self.background_kind not in ("perlin", "file"):
            raise ConfigurationError(f"unknown background kind {self.background_kind!r}")
        if self.mask_source not in ("ellipse", "archive"):
            raise ConfigurationError(f"unknown mask source {self.mask_source!r}")
        if self.background_kind == "file" and self.mask_source != "archive":
            object.__setattr__(self, "mask_source", "archive")
        if self.mask_source == "archive" and not self.archive:
            raise ConfigurationError("an archive directory is required for file backgrounds/masks")
        if len(self.split_sizes) != 3 or any(int(n) <= 0 for n in self.split_sizes):
            raise ConfigurationError("split sizes must be three positive integers")
        if any(int(n) % 2 for n in self.split_sizes):
            raise ConfigurationError("split sizes must be even for exact class balance")
        _check_grid_shape(self.perlin_grid, self.image_shape)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["perlin_grid"] = list(self.perlin_grid)
        d["image_shape"] = list(self.image_shape)
        d["split_sizes"] = list(self.split_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lesion"] = LesionSpec(**d.get("lesion", {}))
        for key in ("perlin_grid", "image_shape", "split_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def paper_config(seed=0, **overrides) -> DatasetConfig:
    """Full-size Perlin condition: 140x192 images, 42k/6k/12k splits."""
    return DatasetConfig(master_seed=seed, **overrides)


def desk_config(seed=0, **overrides) -> DatasetConfig:
    """Laptop-size preset: 64x64 images, 2000/500/1000 splits."""
    base = dict(image_shape=(64, 64), split_sizes=(2000, 500, 1000), perlin_grid=(2, 3))
    base.update(overrides)
    return DatasetConfig(master_seed=seed, **base)


def _check_grid_shape(grid, shape):
    if len(grid) != 2 or min(grid) < 1:
        raise ConfigurationError(f"Perlin grid must be two positive ints, got {grid}")
    if len(shape) != 2 or min(shape) < 8:
        raise ConfigurationError(f"image shape must be at least 8x8, got {shape}")


# ---------------------------------------------------------------------------
# backgrounds
# ---------------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_raw(seed, grid, shape):
    """Un-normalized 2-D gradient noise.

    The lattice has ``(rows + 1) x (cols + 1)`` nodes, each holding a unit
    gradient at an angle drawn uniformly from [0, 2pi).  Pixel ``(i, j)`` sits
    at lattice coordinate ``(i * rows / H, j * cols / W)``.
    """
    _check_grid_shape(grid, shape)
    rows, cols = map(int, grid)
    h, w = map(int, shape)
    angles = _rng.generator(seed).uniform(0.0, 2 * np.pi, size=(rows + 1, cols + 1))
    g_row, g_col = np.sin(angles), np.cos(angles)

    y = np.arange(h) * rows / h
    x = np.arange(w) * cols / w
    i0 = np.floor(y).astype(int)
    j0 = np.floor(x).astype(int)
    fy = (y - i0)[:, None]
    fx = (x - j0)[None, :]
    I, J = np.ix_(i0, j0)

    def corner(di, dj):
        return g_row[I + di, J + dj] * (fy - di) + g_col[I + di, J + dj] * (fx - dj)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bottom - top)


def normalize(image):
    """Min-max rescale to [0, 1]."""
    lo, hi = float(image.min()), float(image.max())
    if not hi > lo:
        raise GenerationError("cannot normalize a constant image")
    return (image - lo) / (hi - lo)


def perlin_field(seed, grid=(5, 8), shape=(140, 192)):
    """Perlin noise background, min-max normalized to [0, 1]."""
    return normalize(perlin_raw(seed, grid, shape))


# ---------------------------------------------------------------------------
# masks and lesions
# ---------------------------------------------------------------------------

def ellipse_mask(shape, center, semi_axes):
    """Boolean mask of pixels inside an axis-aligned ellipse, clipped to the raster."""
    a, b = map(float, semi_axes)
    if a <= 0 or b <= 0:
        raise ConfigurationError("ellipse semi-axes must be positive")
    ii, jj = np.ogrid[:shape[0], :shape[1]]
    mask = ((ii - center[0]) / a) ** 2 + ((jj - center[1]) / b) ** 2 <= 1.0
    if not mask.any():
        raise ConfigurationError("ellipse does not intersect the raster")
    return mask


def default_mask(shape):
    """Centered ellipse covering about 60% of the raster."""
    h, w = shape
    return ellipse_mask(shape, ((h - 1) / 2, (w - 1) / 2),
                        (_ELLIPSE_FRACTION * h / 2, _ELLIPSE_FRACTION * w / 2))


def validate_mask(mask, shape=None):
    mask = np.asarray(mask, dtype=bool)
    if shape is not None and mask.shape != tuple(shape):
        raise ConfigurationError(f"mask shape {mask.shape} does not match {tuple(shape)}")
    if mask.mean() < 0.01:
        raise ConfigurationError("mask covers less than 1% of the raster")
    return mask


def radial_hamming(d, radius):
    """Hamming taper over distance, rescaled to 1 at the center and 0 at ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    d = np.asarray(d, dtype=float)
    h = (0.54 + 0.46 * np.cos(np.pi * np.minimum(d, radius) / radius) - 0.08) / 0.92
    out = np.where(d <= radius, h, 0.0)
    return float(out) if out.ndim == 0 else out


def _disc_offsets(radius):
    r = int(np.floor(radius))
    di, dj = np.mgrid[-r:r + 1, -r:r + 1]
    return (di ** 2 + dj ** 2) <= radius ** 2


def feasible_centers(mask, radius):
    """Pixels where a full disc of ``radius`` fits inside top half of the mask."""
    h = mask.shape[0]
    region = np.asarray(mask, dtype=bool).copy()
    region[h // 2:, :] = False
    return ndimage.binary_erosion(region, structure=_disc_offsets(radius), border_value=0)


def place_lesions(lesion_seed, mask, spec: LesionSpec, feasible=None):
    """Integer lesion centers, pairwise at least one diameter apart."""
    if spec.count == 0:
        return np.zeros((0, 2), dtype=int)
    if feasible is None:
        feasible = feasible_centers(mask, spec.radius)
    candidates = np.argwhere(feasible)
    if len(candidates) == 0:
        raise GenerationError(f"no feasible lesion position (lesion seed {lesion_seed})")
    g = _rng.generator(lesion_seed)
    centers = []
    for k in range(spec.count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            c = candidates[g.integers(len(candidates))]
            if all(np.hypot(*(c - o)) >= spec.diameter for o in centers):
                centers.append(c)
                break
        else:
            raise GenerationError(
                f"could not place lesion {k + 1} of {spec.count} after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts (lesion seed {lesion_seed})")
    return np.array(centers, dtype=int)


def render_lesions(centers, spec: LesionSpec, shape):
    """Multiplicative lesion map for given centers."""
    factors = np.ones(shape)
    ii, jj = np.ogrid[:shape[0], :shape[1]]
    for ci, cj in centers:
        d = np.hypot(ii - ci, jj - cj)
        factors = np.minimum(factors, 1.0 - spec.intensity * radial_hamming(d, spec.radius))
    return factors


def lesion_map(lesion_seed, mask, spec: LesionSpec, shape=None, feasible=None):
    """Lesion map and its binary ground truth for one sample.

    The ground truth depends only on (seed, mask, spec), never on a background.
    """
    mask = np.asarray(mask, dtype=bool)
    shape = tuple(shape) if shape is not None else mask.shape
    if mask.shape != shape:
        raise ConfigurationError(f"mask shape {mask.shape} does not match {shape}")
    centers = place_lesions(lesion_seed, mask, spec, feasible)
    factors = render_lesions(centers, spec, shape)
    return factors, factors < 1.0


@dataclass
class Sample:
    image: np.ndarray
    label: int
    ground_truth: np.ndarray
    lesion_seed: int
    background_seed: int


def make_sample(label, background, mask, spec: LesionSpec, lesion_seed=0, background_seed=0,
                feasible=None):
    """Compose ``background * lesion_map * mask``; class 1 has no lesions."""
    if label not in (1, 2):
        raise ConfigurationError(f"class label must be 1 or 2, got {label}")
    background = np.asarray(background, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if background.shape != mask.shape:
        raise ConfigurationError(f"background {background.shape} and mask {mask.shape} differ")
    spec_used = spec if label == 2 else dataclasses.replace(spec, count=0)
    factors, truth = lesion_map(lesion_seed, mask, spec_used, background.shape, feasible)
    image = background * factors * mask
    return Sample(image, label, truth, lesion_seed, background_seed)


# ---------------------------------------------------------------------------
# background archives
# ---------------------------------------------------------------------------

@dataclass
class ArchiveEntry:
    name: str
    image: np.ndarray
    mask: np.ndarray


def _read_png(path):
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ConfigurationError(f"{path} is not a grayscale image")
    if arr.dtype == np.uint8:
        return arr / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16):
        return arr.astype(float) / 65535.0
    if arr.dtype == bool:
        return arr.astype(float)
    raise ConfigurationError(f"{path}: unsupported pixel type {arr.dtype}")


def load_background_archive(directory, shape=None):
    """Read ``<name>.png`` backgrounds with matching ``<name>_mask.png`` masks."""
    directory = Path(directory)
    entries = []
    for path in sorted(directory.glob("*.png")):
        if path.stem.endswith("_mask"):
            continue
        mask_path = path.with_name(path.stem + "_mask.png")
        if not mask_path.exists():
            raise ConfigurationError(f"{path.name} has no matching {mask_path.name}")
        image = _read_png(path)
        mask = validate_mask(_read_png(mask_path) > 0, image.shape)
        if shape is not None and image.shape != tuple(shape):
            raise ConfigurationError(f"{path.name} is {image.shape}, expected {tuple(shape)}")
        entries.append(ArchiveEntry(path.stem, image, mask))
    if not entries:
        raise ConfigurationError(f"no background images in {directory}")
    return entries


def write_background_archive(directory, images, masks, bits=8):
    """Write a background archive (used by tests and demos)."""
    from PIL import Image as PILImage

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scale, dtype = (255, np.uint8) if bits == 8 else (65535, np.uint16)
    for k, (img, m) in enumerate(zip(images, masks)):
        PILImage.fromarray(np.round(np.clip(img, 0, 1) * scale).astype(dtype)).save(
            directory / f"slice_{k:05d}.png")
        PILImage.fromarray((np.asarray(m, bool) * 255).astype(np.uint8)).save(
            directory / f"slice_{k:05d}_mask.png")


def _archive_blocks(n_entries, sizes):
    """Disjoint contiguous archive ranges per split, proportional to split size."""
    if n_entries < len(sizes):
        raise ConfigurationError(
            f"background archive has {n_entries} entries; at least {len(sizes)} needed")
    total = sum(sizes)
    counts = [max(1, int(n_entries * s // total)) for s in sizes]
    counts[0] = n_entries - sum(counts[1:])
    starts = np.cumsum([0] + counts[:-1])
    return [range(int(a), int(a + c)) for a, c in zip(starts, counts)]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    ground_truth: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    config: DatasetConfig
    splits: dict
    manifest: dict

    def __getitem__(self, name) -> Split:
        return self.splits[name]


def split_labels(master_seed, split, n):
    """Exactly balanced class labels in a seed-determined order."""
    labels = np.array([1] * (n // 2) + [2] * (n - n // 2), dtype=np.uint8)
    return _rng.generator(_rng.derive_seed(master_seed, "labels", split)).permutation(labels)


class SampleFactory:
    """Builds the j-th sample of a split; safe to call for any index in any order."""

    def __init__(self, config: DatasetConfig):
        self.config = config
        self.shape = tuple(config.image_shape)
        self.archive = None
        self.blocks = None
        if config.mask_source == "archive" or config.background_kind == "file":
            self.archive = load_background_archive(config.archive, self.shape)
            self.blocks = dict(zip(SPLITS, _archive_blocks(len(self.archive), config.split_sizes)))
            self._feasible = [feasible_centers(e.mask, config.lesion.radius) for e in self.archive]
        else:
            self._mask = validate_mask(default_mask(self.shape))
            self._feasible_default = feasible_centers(self._mask, config.lesion.radius)

    def seeds(self, split, j):
        m = self.config.master_seed
        return (_rng.derive_seed(m, "lesion", split, j), _rng.derive_seed(m, "background", split, j))

    def mask_for(self, split, j):
        if self.archive is None:
            return self._mask, self._feasible_default, None
        block = self.blocks[split]
        k = block[j % len(block)]
        return self.archive[k].mask, self._feasible[k], k

    def sample(self, split, j, label) -> Sample:
        cfg = self.config
        lesion_seed, background_seed = self.seeds(split, j)
        mask, feasible, k = self.mask_for(split, j)
        if cfg.background_kind == "perlin":
            background = perlin_field(background_seed, cfg.perlin_grid, self.shape)
        else:
            background = normalize(self.archive[k].image)
        return make_sample(int(label), background, mask, cfg.lesion, lesion_seed,
                           background_seed, feasible)


def dataset_manifest(config: DatasetConfig):
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "master_seed": int(config.master_seed),
        "seed_scheme": "splitmix64(master, role, split, index) -> Philox4x64 key",
        "splits": {name: int(n) for name, n in zip(SPLITS, config.split_sizes)},
        "image_shape": list(config.image_shape),
        "files": {name: {role: f"{name}_{role}.ten" for role in ROLES} for name in SPLITS},
        "label_encoding": {"1": "no lesion", "2": "lesions"},
    }


def build_dataset(config: DatasetConfig, out_dir=None, progress=None) -> Dataset:
    """Generate all three splits.

    With ``out_dir`` the tensors are streamed to TEN1 files (suitable for
    paper-size datasets) and the returned arrays are read-only memory maps;
    without it everything stays in memory.
    """
    factory = SampleFactory(config)
    h, w = factory.shape
    splits = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, n in zip(SPLITS, config.split_sizes):
        n = int(n)
        labels = split_labels(config.master_seed, name, n)
        if out_dir is None:
            images = np.zeros((n, h, w), dtype=np.float32)
            truth = np.zeros((n, h, w), dtype=np.uint8)
        else:
            images = open_tensor_for_write(out_dir / f"{name}_images.ten", (n, h, w), np.float32)
            truth = open_tensor_for_write(out_dir / f"{name}_ground_truth.ten", (n, h, w), np.uint8)
        for j in range(n):
            s = factory.sample(name, j, labels[j])
            images[j] = s.image
            truth[j] = s.ground_truth
            if progress is not None:
                progress(name, j, n)
        if out_dir is None:
            splits[name] = Split(images, labels, truth)
        else:
            images.flush()
            truth.flush()
            del images, truth
            lab = open_tensor_for_write(out_dir / f"{name}_labels.ten", (n,), np.uint8)
            lab[:] = labels
            lab.flush()
            del lab
        log.info("generated %s split (%d samples)", name, n)
    manifest = dataset_manifest(config)
    if out_dir is None:
        return Dataset(config, splits, manifest)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_dataset(out_dir)


def load_dataset(directory, mmap=True) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported dataset format {manifest.get('format_version')}")
    splits = {}
    for name in SPLITS:
        files = manifest["files"][name]
        splits[name] = Split(*(load_tensor(directory / files[role], mmap=mmap) for role in ROLES))
    return Dataset(DatasetConfig.from_dict(manifest["config"]), splits, manifest)


def config_hash(config: DatasetConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
