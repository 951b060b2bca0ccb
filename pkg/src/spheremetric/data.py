"""Datasets: synthetic clusters, manifest-based ingestion, image augmentation, stratified splits.

On-disk format: ``manifest.json`` with ``class_names``, optional ``scale`` and a
``samples`` list of ``{path, shape, label}``; each path names a headerless,
row-major, little-endian float32 file.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from spheremetric.errors import ContractError, IngestionError
from spheremetric.numerics import DTYPE, Rng


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.x) != len(self.labels):
            raise ContractError(f"{len(self.x)} samples but {len(self.labels)} labels")
        if not self.class_names:
            n = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [f"class_{i}" for i in range(n)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractError("label outside the declared classes")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.labels[idx], list(self.class_names))


def gen_gaussian_clusters(rng: Rng, n_classes: int, dim: int, samples_per_class: int,
                          center_separation: float, spread: float,
                          min_angle: float = math.pi / 4, max_tries: int = 1000) -> Dataset:
    """Isotropic Gaussian blobs around random centers at radius ``center_separation``.

    Center directions are redrawn until every pair is at least ``min_angle`` apart.
    """
    if n_classes < 2:
        raise ContractError("need at least two classes")
    if center_separation <= 0 or spread < 0:
        raise ContractError("center_separation must be > 0 and spread >= 0")
    for _ in range(max_tries):
        dirs = rng.gen.standard_normal((n_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        angles = np.arccos(np.clip(dirs @ dirs.T, -1, 1))
        if angles[np.triu_indices(n_classes, 1)].min() >= min_angle:
            break
    else:
        raise ContractError(f"could not place {n_classes} centers {min_angle:.3f} rad apart in {dim} dims")
    centers = dirs * center_separation
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    noise = rng.gen.standard_normal((len(labels), dim)) * spread
    return Dataset(centers[labels] + noise, labels, [f"class_{i}" for i in range(n_classes)])


def load_dataset(manifest_path) -> Dataset:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise IngestionError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: invalid JSON ({exc})") from None
    base = os.path.dirname(os.path.abspath(manifest_path))
    class_names = list(manifest.get("class_names", []))
    scale = manifest.get("scale")
    entries = manifest.get("samples", [])
    if not entries:
        warnings.warn(f"{manifest_path}: manifest lists no samples", stacklevel=2)
        return Dataset(np.zeros((0,)), np.zeros(0, dtype=int), class_names)
    samples, labels = [], []
    for entry in entries:
        path = os.path.join(base, entry["path"])
        shape = tuple(int(s) for s in entry["shape"])
        label = int(entry["label"])
        if not 0 <= label < len(class_names):
            raise IngestionError(f"{path}: label {label} outside [0, {len(class_names)})")
        if not os.path.exists(path):
            raise IngestionError(f"missing tensor file: {path}")
        data = np.fromfile(path, dtype="<f4")
        expected = int(np.prod(shape))
        if data.size != expected or os.path.getsize(path) != 4 * expected:
            raise IngestionError(
                f"{path}: shape mismatch, {os.path.getsize(path)} bytes but shape {list(shape)} "
                f"needs {4 * expected}"
            )
        sample = data.reshape(shape).astype(DTYPE)
        if scale is not None:
            sample = sample * float(scale)
        if sample.ndim == 3 and (sample.min() < 0 or sample.max() > 1):
            raise IngestionError(f"{path}: image values outside [0, 1]; declare a scale factor")
        if samples and sample.shape != samples[0].shape:
            raise IngestionError(f"{path}: shape {list(shape)} differs from earlier samples")
        samples.append(sample)
        labels.append(label)
    return Dataset(np.stack(samples), np.array(labels), class_names)


def save_dataset(dataset: Dataset, directory, scale: float | None = None) -> str:
    """Write the manifest/tensor-file layout; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (sample, label) in enumerate(zip(dataset.x, dataset.labels)):
        name = f"sample_{i:06d}.f32"
        stored = sample / scale if scale else sample
        stored.astype("<f4").tofile(os.path.join(directory, name))
        entries.append({"path": name, "shape": list(sample.shape), "label": int(label)})
    manifest = {"class_names": dataset.class_names, "scale": scale, "samples": entries}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 15.0
    brightness_delta: float = 0.1
    flip_probability: float = 0.5
    zoom_range: float = 0.1

    def __post_init__(self):
        if min(self.rotation_degrees, self.brightness_delta, self.zoom_range) < 0:
            raise ContractError("augmentation ranges must be non-negative")
        if not 0 <= self.flip_probability <= 1:
            raise ContractError("flip probability must be in [0, 1]")


NO_AUGMENT = AugmentConfig(0.0, 0.0, 0.0, 0.0)


def _resample(image, matrix):
    """Bilinear resample of every channel, output(o) = input(center + matrix @ (o - center)), zero fill."""
    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    return np.stack([
        ndimage.affine_transform(image[..., c], matrix, offset=offset, order=1, mode="constant", cval=0.0)
        for c in range(image.shape[2])
    ], axis=-1)


def rotate(image, degrees: float):
    """Counter-clockwise rotation (row axis pointing down) about the image center."""
    if degrees == 0:
        return image.copy()
    a = math.radians(degrees)
    # output pixel (r, c) pulls from the input point rotated by -a
    matrix = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    return _resample(image, matrix)


def zoom_in(image, factor: float):
    if factor == 1:
        return image.copy()
    return _resample(image, np.eye(2) / factor)


def flip_horizontal(image):
    return image[:, ::-1, :].copy()


def augment_sample(image, config: AugmentConfig, rng: Rng) -> np.ndarray:
    """Rotation, brightness shift (clamped), horizontal flip, zoom-in; in that order.

    All four random draws are always made so the stream position never depends on the config.
    """
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3:
        raise ContractError(f"augment_sample expects an H x W x C image, got shape {image.shape}")
    angle, shift, flip, zoom = rng.gen.uniform(-1, 1), rng.gen.uniform(-1, 1), rng.gen.random(), rng.gen.random()
    out = rotate(image, angle * config.rotation_degrees)
    out = np.clip(out + shift * config.brightness_delta, 0.0, 1.0)
    if flip < config.flip_probability:
        out = flip_horizontal(out)
    out = zoom_in(out, 1.0 + zoom * config.zoom_range)
    return np.clip(out, 0.0, 1.0)


def stratified_split(dataset: Dataset, train_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Per-class shuffle; the first floor(fraction * class size) members of each class train.

    Swapping the returned pair gives the complementary (1 - fraction) protocol.
    """
    if not 0 < train_fraction < 1:
        raise ContractError(f"train fraction must be in (0, 1), got {train_fraction}")
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        # rounding first keeps e.g. 0.7 * 930 from landing just below 651
        n_train = math.floor(round(train_fraction * members.size, 9))
        if n_train == 0 or n_train == members.size:
            raise ContractError(
                f"class {dataset.class_names[c]!r} ({members.size} samples) leaves an empty partition "
                f"at fraction {train_fraction}"
            )
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)
