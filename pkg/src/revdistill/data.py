"""Datasets: MVTec-style folders, one-class splits of classification corpora, synthetic defects."""

from __future__ import annotations

import gzip
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from skimage import draw
from torch.utils.data import Dataset

from revdistill.backbone import IMAGENET_MEAN, IMAGENET_STD
from revdistill.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

MVTEC_CATEGORIES = (
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut",
    "pill", "screw", "tile", "toothbrush", "transistor", "wood", "zipper",
)  # fmt: skip


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One image. ``image`` is a path or an ``H x W x 3`` uint8 array; ``mask`` is boolean ``H x W``."""

    image: str | np.ndarray
    label: int  # 0 normal, 1 anomalous
    split: str
    category: str
    mask: str | np.ndarray | None = None
    defect_type: str = "good"

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.split == "train" and self.label != 0:
            raise DataError("anomalous sample in a train split")

    @property
    def name(self) -> str:
        if isinstance(self.image, str):
            return f"{self.defect_type}_{Path(self.image).stem}"
        return self.defect_type


def to_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    return np.ascontiguousarray(arr, dtype=np.uint8)


def read_image(src: str | np.ndarray) -> np.ndarray:
    if isinstance(src, np.ndarray):
        return to_rgb(src)
    try:
        with Image.open(src) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {src}: {exc}") from exc


def read_mask(src: str | np.ndarray) -> np.ndarray:
    if isinstance(src, np.ndarray):
        return src.astype(bool)
    with Image.open(src) as im:
        return np.asarray(im.convert("L")) > 127


def normalize_image(rgb: np.ndarray, resolution: int) -> torch.Tensor:
    """uint8 RGB -> resized (bilinear), ImageNet-normalised ``3 x R x R`` float tensor."""
    im = Image.fromarray(to_rgb(rgb))
    if im.size != (resolution, resolution):
        im = im.resize((resolution, resolution), Image.BILINEAR)
    x = torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    im = Image.fromarray(mask.astype(np.uint8) * 255)
    if im.size != (resolution, resolution):
        im = im.resize((resolution, resolution), Image.NEAREST)
    return np.asarray(im) > 127


class ImageSet(Dataset):
    """Torch dataset over sample records.

    Items are dicts with ``image`` (normalised ``3 x R x R``), ``label``,
    ``mask`` (``R x R`` float, zeros when absent), ``has_mask`` and ``index``.
    Decoded items are cached.
    """

    def __init__(self, records: Sequence[SampleRecord], resolution: int, cache: bool = True) -> None:
        self.records = list(records)
        self.resolution = resolution
        self.cache = cache
        self._cache: dict[int, dict] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def __getitem__(self, i: int) -> dict:
        if i in self._cache:
            return self._cache[i]
        rec = self.records[i]
        image = normalize_image(read_image(rec.image), self.resolution)
        if rec.mask is not None:
            mask = torch.from_numpy(resize_mask(read_mask(rec.mask), self.resolution).astype(np.float32))
        else:
            mask = torch.zeros(self.resolution, self.resolution)
        item = {
            "image": image,
            "label": rec.label,
            "mask": mask,
            "has_mask": rec.mask is not None or rec.label == 0,
            "index": i,
        }
        if self.cache:
            self._cache[i] = item
        return item


def assert_normal_only(records: Sequence[SampleRecord]) -> None:
    bad = [r for r in records if r.label != 0]
    if bad:
        raise DataError(f"{len(bad)} anomalous samples in a training split")


# --- MVTec layout -----------------------------------------------------------


def _image_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_mvtec_category(
    root: str | Path, category: str, resolution: int = 256
) -> tuple[ImageSet, ImageSet]:
    """Load ``<root>/<category>/{train/good, test/<defect>, ground_truth/<defect>}``.

    Defect folders without a ground-truth folder are kept for detection only
    (their masks are ``None``) and a warning is issued.
    """
    base = Path(root) / category
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise DataError(f"{base} does not follow the <category>/train/good, <category>/test layout")
    train_files = _image_files(train_dir)
    if not train_files:
        raise DataError(f"no training images in {train_dir}")
    train = [SampleRecord(str(p), 0, "train", category) for p in train_files]

    test: list[SampleRecord] = []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        files = _image_files(defect_dir)
        if defect == "good":
            test += [SampleRecord(str(p), 0, "test", category, defect_type="good") for p in files]
            continue
        gt_dir = base / "ground_truth" / defect
        if not gt_dir.is_dir():
            warnings.warn(f"no ground truth for {category}/{defect}; detection only", stacklevel=2)
        for p in files:
            mask = None
            if gt_dir.is_dir():
                candidates = [gt_dir / f"{p.stem}_mask.png", gt_dir / f"{p.stem}.png"]
                mask = next((str(c) for c in candidates if c.is_file()), None)
                if mask is None:
                    warnings.warn(f"missing mask for {p}; detection only", stacklevel=2)
            test.append(SampleRecord(str(p), 1, "test", category, mask=mask, defect_type=defect))
    if not test:
        raise DataError(f"no test images in {test_dir}")
    return ImageSet(train, resolution), ImageSet(test, resolution)


def write_mvtec_layout(
    train: Sequence[SampleRecord], test: Sequence[SampleRecord], root: str | Path, category: str
) -> Path:
    """Materialise in-memory records as PNG files in the MVTec directory layout."""
    base = Path(root) / category
    counters: dict[tuple[str, str], int] = {}
    for rec in list(train) + list(test):
        folder = base / rec.split / rec.defect_type
        folder.mkdir(parents=True, exist_ok=True)
        n = counters.get((rec.split, rec.defect_type), 0)
        counters[(rec.split, rec.defect_type)] = n + 1
        Image.fromarray(read_image(rec.image)).save(folder / f"{n:03d}.png")
        if rec.label == 1 and rec.mask is not None:
            gt = base / "ground_truth" / rec.defect_type
            gt.mkdir(parents=True, exist_ok=True)
            Image.fromarray(read_mask(rec.mask).astype(np.uint8) * 255).save(gt / f"{n:03d}_mask.png")
    return base


# --- one-class protocol -----------------------------------------------------


@dataclass
class ClassificationCorpus:
    train_images: np.ndarray  # N x H x W (x C), uint8
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    name: str = "corpus"
    class_names: list[str] = field(default_factory=list)

    @property
    def classes(self) -> list[int]:
        return sorted(set(np.unique(self.train_labels).tolist()) | set(np.unique(self.test_labels).tolist()))


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (the MNIST container format), gzipped or not."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: unsupported IDX header (only unsigned-byte data is handled)")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload size {arr.size} does not match dims {dims}")
    return arr.reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        hits = list(root.rglob(name))
        if hits:
            return hits[0]
    raise DataError(f"{stem}[.gz] not found under {root}")


def load_idx_corpus(root: str | Path, name: str = "mnist") -> ClassificationCorpus:
    """MNIST / Fashion-MNIST style directory of the four standard IDX files."""
    root = Path(root)
    return ClassificationCorpus(
        read_idx(_find(root, "train-images-idx3-ubyte")),
        read_idx(_find(root, "train-labels-idx1-ubyte")).astype(np.int64),
        read_idx(_find(root, "t10k-images-idx3-ubyte")),
        read_idx(_find(root, "t10k-labels-idx1-ubyte")).astype(np.int64),
        name=name,
    )


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 1 + 3 * 32 * 32)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), raw[:, 0].astype(np.int64)


def load_cifar10_binary(root: str | Path) -> ClassificationCorpus:
    """CIFAR-10 "binary version": ``data_batch_{1..5}.bin`` and ``test_batch.bin``."""
    root = Path(root)
    batches = sorted(root.rglob("data_batch_*.bin"))
    tests = list(root.rglob("test_batch.bin"))
    if not batches or not tests:
        raise DataError(f"CIFAR-10 binary batches not found under {root}")
    parts = [_read_cifar_batch(b) for b in batches]
    test_x, test_y = _read_cifar_batch(tests[0])
    return ClassificationCorpus(
        np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), test_x, test_y, name="cifar10"
    )


def load_image_folder_corpus(root: str | Path) -> ClassificationCorpus:
    """``<root>/{train,test}/<class_name>/<image>`` with class ids in sorted-name order."""
    root = Path(root)
    names = sorted(d.name for d in (root / "train").iterdir() if d.is_dir()) if (root / "train").is_dir() else []
    if not names:
        raise DataError(f"no class folders under {root / 'train'}")
    out = {}
    for split in ("train", "test"):
        images, labels = [], []
        for cid, cname in enumerate(names):
            folder = root / split / cname
            if not folder.is_dir():
                continue
            for p in _image_files(folder):
                images.append(read_image(str(p)))
                labels.append(cid)
        if not images:
            raise DataError(f"no images in {root / split}")
        out[split] = (np.stack(images), np.array(labels, dtype=np.int64))
    return ClassificationCorpus(*out["train"], *out["test"], name=root.name, class_names=names)


def load_one_class(
    corpus: ClassificationCorpus, normal_class: int, resolution: int = 64
) -> tuple[ImageSet, ImageSet]:
    """Train on one class; every test sample of another class is labelled anomalous.

    Small images are upscaled to ``resolution`` and grayscale is replicated to RGB.
    """
    if normal_class not in corpus.classes:
        raise ConfigError(f"unknown class id {normal_class}; corpus has {corpus.classes}")
    category = corpus.class_names[normal_class] if corpus.class_names else str(normal_class)
    train = [
        SampleRecord(img, 0, "train", category)
        for img, y in zip(corpus.train_images, corpus.train_labels)
        if y == normal_class
    ]
    test = [
        SampleRecord(img, int(y != normal_class), "test", category, defect_type="good" if y == normal_class else f"class{y}")
        for img, y in zip(corpus.test_images, corpus.test_labels)
    ]
    return ImageSet(train, resolution), ImageSet(test, resolution)


# --- synthetic defects --------------------------------------------------------


def value_noise(rng: np.random.Generator, size: int, octaves: Sequence[int], persistence: float = 0.5) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, normalised to [0, 1]."""
    out = np.zeros((size, size))
    amp = 1.0
    for cells in octaves:
        lattice = rng.random((cells + 1, cells + 1))
        out += amp * ndimage.zoom(lattice, size / (cells + 1), order=1, mode="nearest")[:size, :size]
        amp *= persistence
    out -= out.min()
    return out / max(out.max(), 1e-12)


def _defect_mask(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    total = size * size
    while True:
        mask = np.zeros((size, size), dtype=bool)
        if rng.random() < 0.5:
            r0, c0 = rng.uniform(0.2, 0.8, size=2) * size
            ar, ac = rng.uniform(0.05, 0.22, size=2) * size
            rr, cc = draw.ellipse(r0, c0, ar, ac, shape=mask.shape, rotation=rng.uniform(0, np.pi))
            mask[rr, cc] = True
        else:
            pts = rng.uniform(0.15, 0.85, size=(int(rng.integers(2, 5)), 2)) * (size - 1)
            for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
                rr, cc = draw.line(int(r0), int(c0), int(r1), int(c1))
                mask[rr, cc] = True
            width = max(1, int(round(rng.uniform(0.015, 0.04) * size)))
            mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3)), iterations=width)
        if lo <= mask.sum() / total <= hi:
            return mask


def synth_defect_corpus(
    seed: int = 0,
    n_train: int = 200,
    n_test: int = 100,
    resolution: int = 128,
    anomaly_ratio: float = 0.5,
    category: str = "synthetic",
) -> tuple[ImageSet, ImageSet]:
    """Procedural texture corpus with painted defects, fully determined by ``seed``.

    Normal images share one texture family: a fixed two-colour palette blended by
    multi-octave value noise. Defects are ellipses or thick polylines filled with
    a colour-shifted, higher-frequency texture; each covers 1-20% of the image.
    The colour shift is orthogonal to the palette axis so defect colours never
    coincide with a normal blend.
    """
    rng = np.random.default_rng(seed)
    size = resolution
    palette = rng.uniform(0.2, 0.8, size=(2, 3))
    axis = (palette[1] - palette[0]) / np.linalg.norm(palette[1] - palette[0])

    def texture() -> np.ndarray:
        t = value_noise(rng, size, (4, 8, 16))[..., None]
        return palette[0] * (1 - t) + palette[1] * t

    def to_u8(x: np.ndarray) -> np.ndarray:
        return (np.clip(x, 0, 1) * 255 + 0.5).astype(np.uint8)

    train = [SampleRecord(to_u8(texture()), 0, "train", category) for _ in range(n_train)]
    n_anom = int(round(n_test * anomaly_ratio))
    labels = np.zeros(n_test, dtype=int)
    labels[rng.permutation(n_test)[:n_anom]] = 1
    test = []
    for y in labels:
        img = texture()
        if y == 0:
            test.append(SampleRecord(to_u8(img), 0, "test", category))
            continue
        mask = _defect_mask(rng, size, 0.01, 0.20)
        # shift off the palette axis: a shift along it would stay inside the normal gamut
        shift = rng.normal(size=3)
        shift -= (shift @ axis) * axis
        shift *= rng.uniform(0.3, 0.45) / max(np.linalg.norm(shift), 1e-12)
        grain = value_noise(rng, size, (24, 48))[..., None]
        patch = np.clip(img + shift, 0, 1) * (0.75 + 0.5 * grain)
        img = np.where(mask[..., None], patch, img)
        test.append(SampleRecord(to_u8(img), 1, "test", category, mask=mask, defect_type="defect"))
    return ImageSet(train, resolution), ImageSet(test, resolution)
