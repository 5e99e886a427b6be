"""IRSTD dataset layout, deterministic splitting and synthetic samples.

On-disk layout (public datasets and materialized synthetic sets alike)::

    root/images/<id>.png        grayscale (8 or 16 bit; RGB is averaged)
    root/masks/<id>.png         8-bit, foreground 255, background 0
    root/img_idx/train.txt      optional, one id per line
    root/img_idx/test.txt       optional
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

MASK_THRESHOLD = 127


@dataclass
class SampleRecord:
    image: np.ndarray  # float32 [1, H, W] in [0, 1]
    mask: np.ndarray  # uint8 [H, W] in {0, 1}
    source: str
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask is not binary")


# -- mask files ----------------------------------------------------------------

def encode_mask(mask, path):
    """Write a binary mask as an 8-bit single-channel PNG (0 / 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8), mode="L").save(path)


def decode_mask(path):
    """Read a mask file; pixels > 127 are foreground.

    Palette and multi-channel files are converted to grayscale with a warning.
    """
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "I;16", "I"):
            warnings.warn(f"{path}: mask mode {im.mode} coerced to grayscale")
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if im.mode in ("I;16", "I"):
        arr = (arr.astype(np.float64) * 255.0 / max(int(arr.max()), 1))
    if not np.isin(arr, (0, 255)).all():
        warnings.warn(f"{path}: non-binary mask values thresholded at >{MASK_THRESHOLD}")
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def read_image(path):
    """Grayscale image scaled to [0, 1] by the container's maximum value."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im).astype(np.float32) / 65535.0
        elif im.mode == "I":
            arr = np.asarray(im).astype(np.float32) / 65535.0
        elif im.mode == "F":
            arr = np.asarray(im).astype(np.float32)
            arr = arr / max(float(arr.max()), 1e-12)
        else:
            if im.mode not in ("L", "1"):
                im = im.convert("RGB")
                arr = np.asarray(im).astype(np.float32).mean(axis=2) / 255.0
            else:
                arr = np.asarray(im.convert("L")).astype(np.float32) / 255.0
    return np.clip(arr, 0.0, 1.0)[None]


def write_image(image, path):
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# -- splitting -----------------------------------------------------------------

def split_ids(ids, ratio=0.8, seed=0):
    """Deterministic train/test partition by seeded SHA-256 order of the ids.

    The train size is ``floor(ratio * n + 0.5)``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    ids = sorted(set(ids))
    keyed = sorted(ids, key=lambda s: hashlib.sha256(f"{seed}:{s}".encode()).hexdigest())
    n_train = math.floor(ratio * len(ids) + 0.5)
    return sorted(keyed[:n_train]), sorted(keyed[n_train:])


def _read_index(path):
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def list_ids(root):
    root = Path(root)
    images = root / "images"
    if not images.is_dir():
        raise DataError(f"{root} has no images/ directory")
    return sorted(p.stem for p in images.iterdir() if p.suffix.lower() in (".png", ".bmp", ".jpg", ".tif", ".tiff"))


def _find(folder, stem):
    for ext in (".png", ".bmp", ".jpg", ".tif", ".tiff"):
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_record(root, sid):
    root = Path(root)
    img_path = _find(root / "images", sid)
    if img_path is None:
        raise DataError(f"image for id {sid!r} not found")
    mask_path = _find(root / "masks", sid)
    if mask_path is None:
        raise DataError(f"missing mask for id {sid!r}")
    return SampleRecord(read_image(img_path), decode_mask(mask_path), str(img_path), sid)


def load_split(root, ratio=0.8, seed=0):
    """(train, test) lists of :class:`SampleRecord`.

    Index files under ``img_idx/`` take precedence over hashing.
    """
    root = Path(root)
    idx = root / "img_idx"
    if (idx / "train.txt").exists() and (idx / "test.txt").exists():
        train_ids, test_ids = _read_index(idx / "train.txt"), _read_index(idx / "test.txt")
        overlap = set(train_ids) & set(test_ids)
        if overlap:
            raise DataError(f"ids in both train and test index: {sorted(overlap)[:5]}")
    else:
        train_ids, test_ids = split_ids(list_ids(root), ratio, seed)
    return [load_record(root, s) for s in train_ids], [load_record(root, s) for s in test_ids]


# -- synthesis -----------------------------------------------------------------

@dataclass
class SynthSpec:
    """Synthetic small-target scenes.

    Targets are Gaussian blobs whose full width at half maximum equals the
    drawn ``target_size``; the mask is where a blob exceeds half its peak.
    ``max_area_fraction`` caps the total mask area per image: targets that
    would exceed it are not placed.
    """

    image_size: tuple[int, int] = (256, 256)
    targets_per_image: tuple[int, int] = (1, 3)
    target_size: tuple[int, int] = (3, 9)
    target_amplitude: tuple[float, float] = (0.25, 0.6)
    background_level: tuple[float, float] = (0.15, 0.45)
    clutter_octaves: int = 4
    clutter_strength: float = 0.12
    gradient_strength: float = 0.1
    noise_std: float = 0.01
    max_area_fraction: float = 0.002
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("targets_per_image", "target_size", "target_amplitude", "background_level"):
            setattr(self, name, tuple(getattr(self, name)))
        lo, hi = self.target_size
        if lo < 1 or hi < lo or hi > min(self.image_size) / 4:
            raise ConfigError("target_size", f"{self.target_size} outside [1, {min(self.image_size) / 4}]")
        if self.target_amplitude[0] <= 0 or self.target_amplitude[1] < self.target_amplitude[0]:
            raise ConfigError("target_amplitude", "must be a positive, ordered range")
        if self.targets_per_image[0] < 0 or self.targets_per_image[1] < self.targets_per_image[0]:
            raise ConfigError("targets_per_image", "must be a non-negative, ordered range")
        if self.clutter_octaves < 0:
            raise ConfigError("clutter_octaves", "must be non-negative")
        budget = self.max_area_fraction * self.image_size[0] * self.image_size[1]
        if self.targets_per_image[1] > 0 and disc_area(lo) > budget:
            raise ConfigError(
                "max_area_fraction",
                f"{self.max_area_fraction} of {self.image_size} is {budget:.1f} px, "
                f"below the {disc_area(lo)} px of the smallest target")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def disc_area(size):
    """Largest pixel count of a size-``size`` target mask over sub-pixel centre offsets."""
    r = np.arange(-size - 1, size + 2)
    best = 0
    for oy in np.linspace(0, 1, 9, endpoint=False):
        for ox in np.linspace(0, 1, 9, endpoint=False):
            yy, xx = np.meshgrid(r - oy, r - ox, indexing="ij")
            best = max(best, int(((yy ** 2 + xx ** 2) < (size / 2) ** 2).sum()))
    return best


def _clutter(rng, shape, octaves):
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.standard_normal((cells + 1, cells + 1))
        out += amp * ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:h, :w]
        total += amp
        amp *= 0.5
    out /= max(total, 1e-12)
    return out / max(np.abs(out).max(), 1e-12)


def synthesize_sample(spec: SynthSpec, index: int) -> SampleRecord:
    """Deterministic in ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)

    bg = np.full((h, w), rng.uniform(*spec.background_level))
    if spec.clutter_octaves:
        bg += spec.clutter_strength * _clutter(rng, (h, w), spec.clutter_octaves)
    if spec.gradient_strength:
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * (xx / max(w - 1, 1) - 0.5) + np.sin(angle) * (yy / max(h - 1, 1) - 0.5))
        bg += spec.gradient_strength * ramp

    signal = np.zeros((h, w))
    mask = np.zeros((h, w), bool)
    budget = spec.max_area_fraction * h * w
    n_targets = int(rng.integers(spec.targets_per_image[0], spec.targets_per_image[1] + 1))
    for t in range(n_targets):
        size = int(rng.integers(spec.target_size[0], spec.target_size[1] + 1))
        amp = rng.uniform(*spec.target_amplitude)
        sigma = size / (2 * math.sqrt(2 * math.log(2)))
        margin = size
        placed = False
        for _ in range(50):
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob_mask = r2 < (size / 2) ** 2
            if not blob_mask.any():
                continue
            near = ndimage.binary_dilation(blob_mask, iterations=2)
            if (near & mask).any():
                continue
            if mask.sum() + blob_mask.sum() > budget:
                break
            signal += amp * np.exp(-r2 / (2 * sigma ** 2))
            mask |= blob_mask
            placed = True
            break
        if not placed:
            warnings.warn(f"synthetic sample {index}: target {t} skipped (no room within area budget)")

    image = bg + signal
    if spec.noise_std:
        image += rng.normal(0.0, spec.noise_std, (h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return SampleRecord(image, mask.astype(np.uint8), f"synth:seed={spec.seed}:index={index}",
                        f"synth_{spec.seed}_{index:05d}")


def synthesize(spec: SynthSpec, count: int, start: int = 0):
    return [synthesize_sample(spec, start + i) for i in range(count)]


def materialize(records, root, train_ids=None, test_ids=None):
    """Write records in the dataset layout; optional split index files."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for r in records:
        write_image(r.image, root / "images" / f"{r.id}.png")
        encode_mask(r.mask, root / "masks" / f"{r.id}.png")
    if train_ids is not None and test_ids is not None:
        (root / "img_idx").mkdir(exist_ok=True)
        (root / "img_idx" / "train.txt").write_text("".join(f"{s}\n" for s in train_ids))
        (root / "img_idx" / "test.txt").write_text("".join(f"{s}\n" for s in test_ids))


class RecordDataset(torch.utils.data.Dataset):
    """Tensor view of records; optional flips (off unless requested).

    Flips are drawn from ``(seed, epoch, index)``, so set ``epoch`` each pass.
    """

    def __init__(self, records, flip=False, seed=0):
        self.records = list(records)
        self.flip = flip
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        r = self.records[i]
        img, mask = r.image, r.mask[None].astype(np.float32)
        if self.flip:
            rng = np.random.default_rng([self.seed, self.epoch, i])
            if rng.random() < 0.5:
                img, mask = img[..., ::-1], mask[..., ::-1]
            if rng.random() < 0.5:
                img, mask = img[..., ::-1, :], mask[..., ::-1, :]
        return torch.from_numpy(np.ascontiguousarray(img)), torch.from_numpy(np.ascontiguousarray(mask))
