"""Synthetic PET-like phantoms, dataset partitioning and batching."""
import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Stream

BODY_UPTAKE = 1.0
PSF_SIGMA = 1.0
NOISE_FLOOR = 1e-6


@dataclass
class PhantomSample:
    image: np.ndarray  # 1×H×W noisy, blurred, >= 0
    mask: np.ndarray  # 1×H×W lesion indicator
    class_label: int
    clean: np.ndarray  # 1×H×W noise-free blurred image


@dataclass
class Dataset:
    """Stacked model inputs and targets, one sample per leading index."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx])


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def gaussian_blur(img, sigma=PSF_SIGMA):
    """Separable Gaussian blur, kernel truncated at 3 sigma, zero boundary."""
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, radius)
    H, W = img.shape
    rows = sum(k[i] * padded[:, i:i + W] for i in range(k.size))
    return sum(k[i] * rows[i:i + H, :] for i in range(k.size))


def generate_phantoms(count, height=64, width=64, seed=0, lesion_probability=0.5,
                      noise_level=0.1, contrast=4.0, grades=2, balanced=False):
    """Deterministic phantom images with elliptical body and lesions.

    Lesion samples carry 1-3 elliptical hot spots strictly inside the body.
    ``grades > 2`` assigns each lesion sample a hotness grade ``g`` in
    ``1..grades-1`` with lesion uptake ``contrast * g`` times the body; the
    class label is ``g`` (0 for no lesion). With ``balanced`` the labels are a
    seeded shuffle of a round-robin over all grades instead of coin flips.
    """
    if height < 16 or width < 16:
        raise ConfigError(f"phantoms need height and width >= 16, got {height}×{width}")
    if not 0.0 <= lesion_probability <= 1.0:
        raise ConfigError("lesion_probability must lie in [0, 1]")
    if noise_level < 0:
        raise ConfigError("noise_level must be >= 0")
    if contrast < 2.0:
        raise ConfigError("contrast must be >= 2")
    if grades < 2 or count < 0:
        raise ConfigError("grades must be >= 2 and count >= 0")
    root = Stream(seed)
    if balanced:
        labels = np.arange(count) % grades
        labels = labels[root.child(0).permutation(count)]
    else:
        s = root.child(0)
        has = s.uniform(count) < lesion_probability
        labels = np.where(has, 1 + s.integers(count, grades - 1), 0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    samples = []
    for i in range(count):
        s = root.child(1, i)
        u = s.uniform(5)
        cy = height / 2 + (u[0] - 0.5) * 0.1 * height
        cx = width / 2 + (u[1] - 0.5) * 0.1 * width
        ry, rx = (0.32 + 0.1 * u[2]) * height, (0.32 + 0.1 * u[3]) * width
        angle = (u[4] - 0.5) * 0.5
        body = _ellipse(yy, xx, cy, cx, ry, rx, angle) <= 1.0
        img = np.where(body, BODY_UPTAKE, 0.0)
        mask = np.zeros((height, width))
        label = int(labels[i])
        if label > 0:
            n_lesions = 1 + int(s.integers(1, 3)[0])
            placed = 0
            while placed < n_lesions:
                v = s.uniform(5)
                # lesion center within 60% of the body radius, axes 5-10% of the image
                r, phi = 0.6 * np.sqrt(v[0]), 2 * np.pi * v[1]
                ly = cy + r * ry * np.sin(phi)
                lx = cx + r * rx * np.cos(phi)
                lr = (0.05 + 0.05 * v[2]) * height, (0.05 + 0.05 * v[3]) * width
                lesion = _ellipse(yy, xx, ly, lx, lr[0], lr[1], v[4] * np.pi) <= 1.0
                inside = _ellipse(yy, xx, cy, cx, ry, rx, angle)[lesion]
                if lesion.sum() == 0 or inside.max() >= 0.81:
                    continue
                mask[lesion] = 1.0
                placed += 1
            img = np.where(mask > 0, BODY_UPTAKE * contrast * label, img)
        clean = gaussian_blur(img)
        if noise_level > 0:
            noise = s.child(2).normal(height * width).reshape(height, width)
            image = np.maximum(clean + noise_level * np.sqrt(clean + NOISE_FLOOR) * noise, 0.0)
        else:
            image = clean.copy()
        samples.append(PhantomSample(image[None], mask[None], label, clean[None]))
    return samples


def make_dataset(samples, task="segmentation", head="sigmoid", classes=None):
    """Stack phantoms into model inputs and task-specific targets.

    segmentation: lesion masks; synthesis: clean images; classification:
    class labels as an N×1 column (sigmoid) or one-hot rows (softmax).
    """
    inputs = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 1, 1))
    if task == "segmentation":
        targets = np.stack([s.mask for s in samples])
    elif task == "synthesis":
        targets = np.stack([s.clean for s in samples])
    elif task == "classification":
        labels = np.array([s.class_label for s in samples], dtype=np.int64)
        if head == "softmax":
            k = classes or int(labels.max()) + 1
            if labels.size and labels.max() >= k:
                raise ConfigError(f"class label {labels.max()} does not fit {k} classes")
            targets = np.eye(k)[labels]
        else:
            if labels.size and labels.max() > 1:
                raise ConfigError("a sigmoid head needs binary class labels")
            targets = labels.astype(np.float64)[:, None]
    elif task == "regression":
        targets = np.array([[s.mask.mean()] for s in samples])
    else:
        raise ConfigError(f"unknown task {task!r}")
    return Dataset(inputs, targets)


@dataclass
class SplitSpec:
    train: float = 0.7
    validation: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fr}")


def split_indices(n, spec: SplitSpec):
    perm = Stream(spec.seed).child(11).permutation(n)
    n_val = int(round(spec.validation * n))
    n_test = int(round(spec.test * n))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ConfigError("split fractions leave no room for the training set")
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(dataset, spec: SplitSpec):
    """Seeded shuffle, then contiguous train/validation/test slices."""
    if len(dataset) == 0:
        raise ConfigError("cannot split an empty dataset")
    parts = split_indices(len(dataset), spec)
    if isinstance(dataset, Dataset):
        return tuple(dataset.subset(p) for p in parts)
    return tuple([dataset[i] for i in p] for p in parts)


@dataclass
class FoldPlan:
    k: int
    folds: list
    seed: int

    def train_indices(self, i):
        return np.concatenate([f for j, f in enumerate(self.folds) if j != i])

    def test_indices(self, i):
        return self.folds[i]


def kfold(n, k, seed=0):
    """Round-robin assignment of a seeded permutation of ``range(n)`` to k folds."""
    if not 2 <= k <= n:
        raise ConfigError(f"k must satisfy 2 <= k <= {n}, got {k}")
    perm = Stream(seed).child(13).permutation(n)
    return FoldPlan(k, [np.sort(perm[i::k]) for i in range(k)], seed)


def batches(n, batch_size, seed=0, epoch_index=0):
    """Index batches for one epoch, shuffled by (seed, epoch_index)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = Stream(seed).child(17, epoch_index).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# manifest

MANIFEST_HEADER = ["index", "image_path", "mask_path", "class_label", "clean_path"]


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)


def read_manifest(path, scale):
    """Load phantoms listed in a manifest; relative paths resolve against its folder."""
    from .pgm import read_pgm

    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            if len(row) != 5:
                raise FormatError(f"bad manifest row {row}")
            paths = [os.path.join(base, p) for p in (row[1], row[2], row[4])]
            image, mask, clean = (read_pgm(p) for p in paths)
            samples.append(PhantomSample(image * scale, np.round(mask), int(row[3]), clean * scale))
    return samples
