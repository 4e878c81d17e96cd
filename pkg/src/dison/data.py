"""Synthetic patch benchmark, augmentation and batch sampling.

ID patches are a class-dependent Gaussian blob plus pixel noise on a P x P
grid. OOD patches are ID-style patches carrying an overlaid artifact
(``ood_kind="artifact"``) or a global intensity/contrast shift
(``ood_kind="intensity_shift"``). Brightness noise stands in for color jitter.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

SPLITS = ("train", "id_test", "ood_test")
APPLY_ON = ("both", "source_only", "target_only", "none")

# (enabled, apply_on) for each augmentation ablation setting
AUGMENT_VARIANTS = {
    "none": (False, "none"),
    "source_only": (True, "source_only"),
    "target_only": (True, "target_only"),
    "both": (True, "both"),
}


@dataclass
class Dataset:
    x: np.ndarray                  # (n, P*P) float32 in [0, 1]
    y: np.ndarray                  # (n,) int64 class labels
    ood: np.ndarray                # (n,) bool; harness-only ground truth
    patch_size: int
    num_classes: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ood = np.asarray(self.ood, dtype=bool)
        if self.x.ndim != 2 or self.x.shape[1] != self.patch_size ** 2:
            raise ValueError(f"pixels must have shape (n, {self.patch_size ** 2}), got {self.x.shape}")
        if not (len(self.x) == len(self.y) == len(self.ood)):
            raise ValueError("pixels, labels and ood flags differ in length")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.ood[idx], self.patch_size, self.num_classes)


@dataclass(frozen=True)
class SyntheticConfig:
    patch_size: int = 16
    num_classes: int = 2
    train_per_class: int = 200
    n_id_test: int = 50
    n_ood_test: int = 50
    noise_sigma: float = 0.08
    blob_sigma: float = 2.0
    blob_amplitude: float = 0.8
    center_jitter: float = 1.5
    class_offset: float = 3.0
    artifact: str = "corner_square"
    artifact_size: int = 4
    artifact_value: float = 1.0
    ood_kind: str = "artifact"
    intensity_gain: float = 0.6
    intensity_offset: float = 0.25
    seed: int = 0

    def validate(self):
        p = self.patch_size
        if p < 8:
            raise ValueError(f"patch_size must be >= 8, got {p}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.artifact not in ("corner_square", "stripe"):
            raise ValueError(f"unknown artifact {self.artifact!r}")
        if self.ood_kind not in ("artifact", "intensity_shift"):
            raise ValueError(f"unknown ood_kind {self.ood_kind!r}")
        if not 1 <= self.artifact_size <= p // 2:
            raise ValueError(f"artifact_size {self.artifact_size} does not fit a {p}x{p} patch")
        if self.class_offset * (self.num_classes - 1) >= p - 2:
            raise ValueError("class blob centers do not fit inside the patch")
        if min(self.train_per_class, self.n_id_test, self.n_ood_test) < 0:
            raise ValueError("split sizes must be non-negative")


def split_seed(seed: int, split: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLITS.index(split)])


def class_centers(config: SyntheticConfig) -> np.ndarray:
    """(C, 2) blob centers as (row, col); classes are spread along the column axis."""
    p = config.patch_size
    mid = (p - 1) / 2
    cols = mid + config.class_offset * (np.arange(config.num_classes) - (config.num_classes - 1) / 2)
    return np.stack([np.full(config.num_classes, mid), cols], axis=1)


def artifact_mask(config: SyntheticConfig) -> np.ndarray:
    p, s = config.patch_size, config.artifact_size
    mask = np.zeros((p, p), dtype=bool)
    if config.artifact == "corner_square":
        mask[:s, :s] = True
    else:
        row = p - 1 - s
        mask[row:row + max(1, s // 2), :] = True
    return mask


def make_id_patches(config: SyntheticConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = config.patch_size
    n = len(labels)
    rr, cc = np.mgrid[0:p, 0:p]
    centers = class_centers(config)[labels] + rng.normal(0.0, config.center_jitter, size=(n, 2))
    width = config.blob_sigma * rng.uniform(0.8, 1.2, size=n)
    amp = config.blob_amplitude * rng.uniform(0.8, 1.0, size=n)
    d2 = (rr[None] - centers[:, 0, None, None]) ** 2 + (cc[None] - centers[:, 1, None, None]) ** 2
    blob = amp[:, None, None] * np.exp(-d2 / (2 * width[:, None, None] ** 2))
    img = blob + 0.1 + rng.normal(0.0, config.noise_sigma, size=(n, p, p))
    return np.clip(img, 0.0, 1.0).reshape(n, p * p).astype(np.float32)


def overlay_artifact(config: SyntheticConfig, patches: np.ndarray) -> np.ndarray:
    out = patches.copy()
    out[:, artifact_mask(config).ravel()] = config.artifact_value
    return out


def intensity_shift(config: SyntheticConfig, patches: np.ndarray) -> np.ndarray:
    return np.clip(patches * config.intensity_gain + config.intensity_offset, 0.0, 1.0).astype(np.float32)


def _labels(n_per_class: int, num_classes: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes), n_per_class)


def _split(config: SyntheticConfig, split: str, n: int):
    rng = np.random.default_rng(split_seed(config.seed, split))
    if split == "train":
        labels = _labels(n, config.num_classes)
    else:
        labels = rng.integers(0, config.num_classes, size=n)
    return labels, make_id_patches(config, labels, rng)


def generate(config: SyntheticConfig = SyntheticConfig()) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, id_test, ood_test) splits, each from its own seed stream."""
    config.validate()
    p, c = config.patch_size, config.num_classes

    y_tr, x_tr = _split(config, "train", config.train_per_class)
    y_id, x_id = _split(config, "id_test", config.n_id_test)
    y_ood, base = _split(config, "ood_test", config.n_ood_test)
    x_ood = overlay_artifact(config, base) if config.ood_kind == "artifact" else intensity_shift(config, base)

    train = Dataset(x_tr, y_tr, np.zeros(len(y_tr), bool), p, c)
    id_test = Dataset(x_id, y_id, np.zeros(len(y_id), bool), p, c)
    ood_test = Dataset(x_ood, y_ood, np.ones(len(y_ood), bool), p, c)
    return train, id_test, ood_test


def ood_bases(config: SyntheticConfig) -> np.ndarray:
    """The ID-style patches the OOD split was built from, before the artifact/shift."""
    return _split(config, "ood_test", config.n_ood_test)[1]


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    apply_on: str = "both"
    flip_prob: float = 0.5
    max_shift: int = 2
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.apply_on not in APPLY_ON:
            raise ValueError(f"apply_on must be one of {APPLY_ON}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.max_shift < 0 or self.noise_sigma < 0:
            raise ValueError("max_shift and noise_sigma must be non-negative")

    def applies_to(self, role: str) -> bool:
        if not self.enabled or self.apply_on == "none":
            return False
        return self.apply_on == "both" or self.apply_on == f"{role}_only"

    @classmethod
    def variant(cls, name: str, **kwargs) -> "AugmentPolicy":
        enabled, apply_on = AUGMENT_VARIANTS[name]
        return cls(enabled=enabled, apply_on=apply_on, **kwargs)


NO_AUGMENT = AugmentPolicy(enabled=False, apply_on="none")


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, patch_size: int) -> np.ndarray:
    """Horizontal flip, circular shift and clamped additive noise, drawn per sample.

    Accepts one flat patch or a batch of them; the label is untouched because
    only pixels go in.
    """
    if not policy.enabled:
        return x
    single = x.ndim == 1
    imgs = np.asarray(x, dtype=np.float32).reshape(-1, patch_size, patch_size)
    n = imgs.shape[0]
    flips = rng.random(n) < policy.flip_prob
    shifts = rng.integers(-policy.max_shift, policy.max_shift + 1, size=(n, 2))
    grid = np.arange(patch_size)
    rows = (grid[None, :] - shifts[:, :1]) % patch_size
    cols = (grid[None, :] - shifts[:, 1:]) % patch_size
    cols = np.where(flips[:, None], patch_size - 1 - cols, cols)
    out = imgs[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    if policy.noise_sigma > 0:
        out += rng.normal(0.0, policy.noise_sigma, size=out.shape).astype(np.float32)
        np.clip(out, 0.0, 1.0, out=out)
    out = out.reshape(n, patch_size * patch_size)
    return out[0] if single else out


def class_subset(dataset: Dataset, label: int) -> Dataset:
    return dataset.subset(np.flatnonzero(dataset.y == label))


def sample_batch(dataset: Dataset, size: int, rng: np.random.Generator) -> Dataset:
    """Uniform draw without replacement (the first ``size`` items of a fresh shuffle)."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if size > len(dataset):
        raise ValueError(f"batch of {size} exceeds dataset of {len(dataset)}")
    return dataset.subset(rng.permutation(len(dataset))[:size])


class EpochSampler:
    """Mini-batches drawn in epoch-shuffled order; reshuffles when the order runs out."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n <= 0:
            raise ValueError("cannot sample from an empty dataset")
        self.n = n
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self, size: int) -> np.ndarray:
        parts, need = [], size
        while need > 0:
            if self._order.size == 0:
                self._order = self.rng.permutation(self.n)
            take = self._order[:need]
            self._order = self._order[need:]
            parts.append(take)
            need -= take.size
        return np.concatenate(parts)


_MAGIC = b"DSYN"
_HEADER = struct.Struct("<4sHIII")


def save_dataset(dataset: Dataset, path) -> None:
    """Flat binary: magic, version, P, C, n, then float32 pixels, int32 labels, uint8 ood flags."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, dataset.patch_size, dataset.num_classes, len(dataset)))
        fh.write(dataset.x.astype("<f4").tobytes())
        fh.write(dataset.y.astype("<i4").tobytes())
        fh.write(dataset.ood.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, p, c, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a dataset file")
    off = _HEADER.size
    npix = n * p * p
    expected = off + 4 * npix + 4 * n + n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    x = np.frombuffer(raw, "<f4", npix, off).reshape(n, p * p)
    off += 4 * npix
    y = np.frombuffer(raw, "<i4", n, off)
    off += 4 * n
    ood = np.frombuffer(raw, np.uint8, n, off).astype(bool)
    return Dataset(x.astype(np.float32), y.astype(np.int64), ood, p, c)


def config_dict(config) -> dict:
    return asdict(config)
