"""Datasets: folder-tree ingestion, stratified 70/15/15 splitting, and a
synthetic blob generator with ground-truth boxes for localization tests.

Images are kept in memory as (c,h,w) float32 arrays in raw [0,255] range;
rescaling to [0,1] happens in the training/eval pipelines.
"""

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass
class Sample:
    image: np.ndarray  # (c,h,w) float32, values in [0,255]
    label: int
    path: str | None = None
    bbox: tuple | None = None  # (y0, x0, y1, x1), half-open, image coords


@dataclass
class Dataset:
    samples: list
    class_names: list
    image_size: tuple  # (c, h, w)

    def __len__(self):
        return len(self.samples)

    def arrays(self):
        """Stack into (images (n,c,h,w) float32, labels (n,) int64)."""
        if not self.samples:
            c, h, w = self.image_size
            return (np.zeros((0, c, h, w), dtype=np.float32),
                    np.zeros(0, dtype=np.int64))
        images = np.stack([s.image for s in self.samples]).astype(np.float32)
        labels = np.array([s.label for s in self.samples], dtype=np.int64)
        return images, labels


@dataclass
class SplitSpec:
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(
                f"need three non-negative fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(
                f"split fractions must sum to 1, got {self.fractions}")


def _decode_one(path, image_size):
    c, h, w = image_size
    with Image.open(path) as img:
        img = img.convert("L" if c == 1 else "RGB")
        if img.size != (w, h):
            img = img.resize((w, h), Image.Resampling.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, 2, 0)
    return arr


def load_dataset(root_dir, image_size=(1, 64, 64)):
    """Read `root/<class>/*.png` into a Dataset.

    Class indices follow sorted folder names; files are decoded to 8-bit
    gray or RGB and bilinearly resized to image_size. Empty class folders
    warn; undecodable files are collected and raised together.
    """
    if not os.path.isdir(root_dir):
        raise ConfigError(f"dataset root {root_dir!r} is not a directory")
    class_names = sorted(d for d in os.listdir(root_dir)
                         if os.path.isdir(os.path.join(root_dir, d)))
    if not class_names:
        raise ConfigError(f"no class folders under {root_dir!r}")

    jobs = []  # (path, label), ordered by class then file name
    for label, name in enumerate(class_names):
        folder = os.path.join(root_dir, name)
        files = sorted(f for f in os.listdir(folder)
                       if f.lower().endswith(".png"))
        if not files:
            warnings.warn(f"class folder {folder!r} has no .png files")
        jobs.extend((os.path.join(folder, f), label) for f in files)

    def decode(job):
        path, label = job
        try:
            return Sample(_decode_one(path, image_size), label, path=path), None
        except Exception as exc:  # noqa: BLE001 - report every bad file
            return None, f"{path}: {exc}"

    workers = int(os.environ.get("XMED_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(decode, jobs))
    else:
        results = [decode(j) for j in jobs]

    bad = [err for _, err in results if err]
    if bad:
        raise DataError("could not decode {} file(s):\n  {}".format(
            len(bad), "\n  ".join(bad)))
    return Dataset([s for s, _ in results], class_names, tuple(image_size))


def split_dataset(dataset, spec):
    """Per-class seeded shuffle into train/val/test Datasets.

    Within each class, samples are ordered by file name (falling back to
    dataset order) before shuffling, so membership depends only on the
    names and the seed. Sizes per class: floor(f_train*n), floor(f_val*n),
    remainder.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot split an empty dataset")
    seed = spec.seed & _SEED_MASK
    parts = ([], [], [])
    for label in range(len(dataset.class_names)):
        members = [i for i, s in enumerate(dataset.samples)
                   if s.label == label]
        if len(members) < 3:
            raise ConfigError(
                f"class {dataset.class_names[label]!r} has {len(members)} "
                "sample(s); need >= 3 to populate train/val/test")
        members.sort(key=lambda i: (dataset.samples[i].path or "", i))
        order = np.random.default_rng((seed, label)).permutation(len(members))
        # +1e-9 recovers the exact decimal floor from the float product
        n_train = math.floor(spec.fractions[0] * len(members) + 1e-9)
        n_val = math.floor(spec.fractions[1] * len(members) + 1e-9)
        for slot, pos in ((0, order[:n_train]),
                          (1, order[n_train:n_train + n_val]),
                          (2, order[n_train + n_val:])):
            parts[slot].extend(members[p] for p in pos)
    return tuple(
        Dataset([dataset.samples[i] for i in sorted(idx)],
                dataset.class_names, dataset.image_size)
        for idx in parts)


def generate_synthetic(n, size=64, seed=0):
    """Two-class stand-in data: 'lesion' images carry one bright Gaussian
    blob (bounding box recorded) on a noise background, 'normal' images
    are noise only. Deterministic per (seed, class, index)."""
    if size < 16:
        raise ConfigError(f"synthetic images must be >= 16x16, got {size}")
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    seed = seed & _SEED_MASK
    class_names = ["lesion", "normal"]  # sorted; lesion -> label 0
    counts = [(n + 1) // 2, n // 2]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    samples = []
    for label, count in enumerate(counts):
        for i in range(count):
            rng = np.random.default_rng((seed, label, i))
            img = 60.0 + 20.0 * rng.standard_normal((size, size))
            bbox = None
            if label == 0:
                sigma = rng.uniform(size / 16, size / 10)
                r = math.ceil(3 * sigma)
                margin = r + 1
                cy = rng.uniform(margin, size - 1 - margin)
                cx = rng.uniform(margin, size - 1 - margin)
                amp = rng.uniform(120.0, 180.0)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                    / (2 * sigma * sigma))
                bbox = (int(round(cy)) - r, int(round(cx)) - r,
                        int(round(cy)) + r + 1, int(round(cx)) + r + 1)
            img = np.clip(img, 0, 255).astype(np.float32)[None]
            samples.append(Sample(img, label, bbox=bbox))
    return Dataset(samples, class_names, (1, size, size))
