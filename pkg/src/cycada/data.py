"""Dataset ingestion, canonical IDX storage, and seeded synthetic toy domains.

All prepared datasets are stored as uint8 IDX tensors (big-endian dims, the
native MNIST container) with a JSON descriptor sidecar carrying a content
hash. Images normalize to [-1, 1] through the exact affine map
``v / 127.5 - 1``; resampling is fixed-kernel bilinear so hashes reproduce
across machines. Raw archive downloads are an offline user step; nothing
here touches the network.
"""

from __future__ import annotations

import bz2
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, IdxFormatError

IDX_UBYTE_TYPE = 0x08
SUPPORTED_RANKS = (1, 3)

SHIFTS = ("mnist-usps", "usps-mnist", "svhn-mnist")
TOY_KINDS = ("intensity-inversion", "channel-swap", "additive-stripe-noise")


# ---------------------------------------------------------------------------
# IDX container


def save_idx(array: np.ndarray, path) -> None:
    """Write a uint8 tensor of rank 1 or 3 in IDX format (big-endian dims)."""
    if array.dtype != np.uint8:
        raise IdxFormatError(f"IDX payload must be uint8, got {array.dtype}")
    if array.ndim not in SUPPORTED_RANKS:
        raise IdxFormatError(f"unsupported rank {array.ndim}, expected one of {SUPPORTED_RANKS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, IDX_UBYTE_TYPE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped); validates magic, rank, and size."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero1, zero2, typecode, rank = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or typecode != IDX_UBYTE_TYPE:
        raise IdxFormatError(f"{path}: bad magic {raw[:4].hex()}")
    if rank not in SUPPORTED_RANKS:
        raise IdxFormatError(f"{path}: unsupported rank {rank}")
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    expected = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} < {expected} bytes)")
    if len(payload) > expected:
        raise IdxFormatError(
            f"{path}: payload size mismatch ({len(payload)} bytes for dims {dims})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


# ---------------------------------------------------------------------------
# Normalization (exact affine map, inverse recovers uint8 within rounding)


def to_unit_range(images: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1] via v / 127.5 - 1."""
    return (images.astype(np.float32) / 127.5) - 1.0


def from_unit_range(values: np.ndarray) -> np.ndarray:
    """float in [-1, 1] -> uint8, round-half-even."""
    return np.clip(np.rint((values + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W) or (N, C, H, W) -> float32 tensor (N, C, H, W) in [-1, 1]."""
    arr = to_unit_range(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    return torch.from_numpy(arr)


# ---------------------------------------------------------------------------
# Descriptors and in-memory datasets


@dataclass
class DatasetDescriptor:
    name: str
    split: str
    image_shape: tuple
    num_classes: int
    count: int
    sha256: str

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "shape": list(self.image_shape),
            "classes": self.num_classes,
            "count": self.count,
            "sha256": self.sha256,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetDescriptor":
        return cls(
            name=data["name"],
            split=data["split"],
            image_shape=tuple(data["shape"]),
            num_classes=data["classes"],
            count=data["count"],
            sha256=data["sha256"],
        )


def content_hash(images: np.ndarray, labels: np.ndarray) -> str:
    """sha256 over the uint8 image and label payloads."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(images.astype(np.uint8)).tobytes())
    digest.update(np.ascontiguousarray(labels.astype(np.uint8)).tobytes())
    return digest.hexdigest()


@dataclass
class ImageDataset:
    """uint8 images plus integer labels and a hashable descriptor."""

    images: np.ndarray
    labels: np.ndarray
    descriptor: DatasetDescriptor

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def build(cls, name: str, split: str, images: np.ndarray, labels: np.ndarray,
              num_classes: int) -> "ImageDataset":
        if len(images) != len(labels):
            raise DataError(f"{name}/{split}: {len(images)} images vs {len(labels)} labels")
        shape = images.shape[1:] if images.ndim == 4 else (1,) + images.shape[1:]
        desc = DatasetDescriptor(
            name=name,
            split=split,
            image_shape=tuple(int(v) for v in shape),
            num_classes=num_classes,
            count=len(labels),
            sha256=content_hash(images, labels),
        )
        return cls(images=images, labels=labels.astype(np.int64), descriptor=desc)

    def save(self, out_dir) -> tuple:
        """Write images/labels IDX plus the descriptor sidecar; returns the paths."""
        out_dir = Path(out_dir)
        stem = f"{self.descriptor.name}-{self.descriptor.split}"
        images_path = out_dir / f"{stem}-images.idx"
        labels_path = out_dir / f"{stem}-labels.idx"
        imgs = self.images
        if imgs.ndim == 4 and imgs.shape[1] == 1:
            imgs = imgs[:, 0]
        save_idx(imgs.astype(np.uint8), images_path)
        save_idx(self.labels.astype(np.uint8), labels_path)
        sidecar = out_dir / f"{stem}.json"
        sidecar.write_text(json.dumps(self.descriptor.to_dict(), indent=1, sort_keys=True))
        return images_path, labels_path, sidecar

    @classmethod
    def load(cls, out_dir, name: str, split: str) -> "ImageDataset":
        out_dir = Path(out_dir)
        stem = f"{name}-{split}"
        sidecar = out_dir / f"{stem}.json"
        if not sidecar.exists():
            raise DataError(f"descriptor sidecar not found: {sidecar}")
        desc = DatasetDescriptor.from_dict(json.loads(sidecar.read_text()))
        images = load_idx(out_dir / f"{stem}-images.idx")
        labels = load_idx(out_dir / f"{stem}-labels.idx").astype(np.int64)
        if content_hash(images, labels) != desc.sha256:
            raise DataError(f"{stem}: payload hash does not match its descriptor")
        if len(labels) != desc.count:
            raise DataError(f"{stem}: item count mismatch")
        return cls(images=images, labels=labels, descriptor=desc)


@dataclass
class DomainData:
    """Train and test splits for one domain."""

    name: str
    train: ImageDataset
    test: ImageDataset


# ---------------------------------------------------------------------------
# Deterministic resampling and color helpers


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (N, H, W) arrays, half-pixel-center (align_corners=False).

    Source coordinates are ``(dst + 0.5) * (in / out) - 0.5``, clamped at the
    borders. Runs in float64 so results are machine-independent.
    """
    arr = images.astype(np.float64)
    n, h, w = arr.shape

    def axis_coords(out_size, in_size):
        src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0.0, in_size - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_size - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    top = arr[:, y0][:, :, x0] * (1 - fx) + arr[:, y0][:, :, x1] * fx
    bottom = arr[:, y1][:, :, x0] * (1 - fx) + arr[:, y1][:, :, x1] * fx
    return top * (1 - fy[None, :, None]) + bottom * fy[None, :, None]


def rgb_to_luminance(images: np.ndarray) -> np.ndarray:
    """ITU-R 601 luminance 0.299 R + 0.587 G + 0.114 B over a trailing-RGB axis."""
    weights = np.array([0.299, 0.587, 0.114], dtype=np.float64)
    return images.astype(np.float64) @ weights


# ---------------------------------------------------------------------------
# Raw digit archives (offline downloads; formats documented in the README)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
USPS_FILES = {"train": "usps.bz2", "test": "usps.t.bz2"}
SVHN_FILES = {"train": "train_32x32.mat", "test": "test_32x32.mat"}


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"missing raw file {stem}[.gz] under {directory}")


def _verify_raw(path: Path, expected_hashes: dict | None) -> None:
    if not expected_hashes:
        return
    key = path.name
    if key not in expected_hashes:
        return
    actual = hashlib.sha256(path.read_bytes()).hexdigest()
    if actual != expected_hashes[key]:
        raise DataError(f"raw archive {path} checksum mismatch: {actual}")


def _load_mnist_raw(raw_root: Path, split: str, expected_hashes=None):
    directory = raw_root / "mnist"
    img_stem, lbl_stem = MNIST_FILES[split]
    img_path = _find_idx(directory, img_stem)
    lbl_path = _find_idx(directory, lbl_stem)
    _verify_raw(img_path, expected_hashes)
    _verify_raw(lbl_path, expected_hashes)
    return load_idx(img_path), load_idx(lbl_path).astype(np.int64)


def _load_usps_raw(raw_root: Path, split: str, expected_hashes=None):
    """Parse the standard bzip2 libsvm-format USPS distribution (16x16, [-1, 1])."""
    path = raw_root / "usps" / USPS_FILES[split]
    if not path.exists():
        raise DataError(f"missing raw file {path}")
    _verify_raw(path, expected_hashes)
    images, labels = [], []
    with bz2.open(path, "rt") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(float(parts[0])) - 1)
            pixels = np.zeros(256, dtype=np.float64)
            for item in parts[1:]:
                idx, val = item.split(":")
                pixels[int(idx) - 1] = float(val)
            images.append(pixels.reshape(16, 16))
    arr = np.stack(images)
    return from_unit_range(arr), np.asarray(labels, dtype=np.int64)


def _load_svhn_raw(raw_root: Path, split: str, expected_hashes=None):
    from scipy.io import loadmat

    path = raw_root / "svhn" / SVHN_FILES[split]
    if not path.exists():
        raise DataError(f"missing raw file {path}")
    _verify_raw(path, expected_hashes)
    mat = loadmat(path)
    images = np.transpose(mat["X"], (3, 0, 1, 2))  # (N, 32, 32, 3)
    labels = mat["y"].reshape(-1).astype(np.int64)
    labels[labels == 10] = 0
    return images.astype(np.uint8), labels


@dataclass
class PreparedShift:
    """Canonicalized source/target domains emitted by :func:`prepare_digits`."""

    shift: str
    out_dir: Path
    source: DomainData
    target: DomainData


def _canonical_gray(images: np.ndarray, size: int) -> np.ndarray:
    """Resize single-channel uint8 images to ``size`` and round back to uint8."""
    if images.shape[1] == size and images.shape[2] == size:
        return images.astype(np.uint8)
    resized = resize_bilinear(images, size, size)
    return np.clip(np.rint(resized), 0, 255).astype(np.uint8)


def prepare_digits(raw_root, shift: str, out_dir, expected_hashes: dict | None = None
                   ) -> PreparedShift:
    """Canonicalize a digit adaptation shift into IDX pairs normalized for [-1, 1].

    mnist-usps / usps-mnist work at 1x28x28 (USPS upsampled 16->28);
    svhn-mnist works at 1x32x32 (SVHN luminance-grayscaled, MNIST upsampled
    28->32).
    """
    if shift not in SHIFTS:
        raise DataError(f"unknown shift {shift!r}, expected one of {SHIFTS}")
    raw_root = Path(raw_root)
    out_dir = Path(out_dir) / shift
    domains = {}
    if shift in ("mnist-usps", "usps-mnist"):
        size = 28
        for split in ("train", "test"):
            m_img, m_lbl = _load_mnist_raw(raw_root, split, expected_hashes)
            u_img, u_lbl = _load_usps_raw(raw_root, split, expected_hashes)
            domains.setdefault("mnist", {})[split] = (_canonical_gray(m_img, size), m_lbl)
            domains.setdefault("usps", {})[split] = (_canonical_gray(u_img, size), u_lbl)
        source_name, target_name = shift.split("-")
    else:
        size = 32
        for split in ("train", "test"):
            s_img, s_lbl = _load_svhn_raw(raw_root, split, expected_hashes)
            gray = np.clip(np.rint(rgb_to_luminance(s_img)), 0, 255).astype(np.uint8)
            m_img, m_lbl = _load_mnist_raw(raw_root, split, expected_hashes)
            domains.setdefault("svhn", {})[split] = (_canonical_gray(gray, size), s_lbl)
            domains.setdefault("mnist", {})[split] = (_canonical_gray(m_img, size), m_lbl)
        source_name, target_name = "svhn", "mnist"

    built = {}
    for name, splits in domains.items():
        datasets = {}
        for split, (images, labels) in splits.items():
            ds = ImageDataset.build(name, split, images, labels, num_classes=10)
            ds.save(out_dir)
            datasets[split] = ds
        built[name] = DomainData(name=name, train=datasets["train"], test=datasets["test"])
    return PreparedShift(shift=shift, out_dir=out_dir,
                         source=built[source_name], target=built[target_name])


def load_prepared_shift(prepared_root, shift: str) -> PreparedShift:
    """Reload the IDX pairs written by :func:`prepare_digits`."""
    if shift not in SHIFTS:
        raise DataError(f"unknown shift {shift!r}, expected one of {SHIFTS}")
    out_dir = Path(prepared_root) / shift
    if shift == "svhn-mnist":
        source_name, target_name = "svhn", "mnist"
    else:
        source_name, target_name = shift.split("-")
    domains = {}
    for name in (source_name, target_name):
        domains[name] = DomainData(
            name=name,
            train=ImageDataset.load(out_dir, name, "train"),
            test=ImageDataset.load(out_dir, name, "test"),
        )
    return PreparedShift(shift=shift, out_dir=out_dir,
                         source=domains[source_name], target=domains[target_name])


# ---------------------------------------------------------------------------
# Synthetic toy domain pairs


@dataclass(frozen=True)
class ToyDomainSpec:
    """Seeded recipe for a source/target pair with a known, simple shift."""

    kind: str = "intensity-inversion"
    base_shape: tuple = (1, 16, 16)
    num_classes: int = 2
    samples_per_class: int = 200
    seed: int = 0
    test_samples_per_class: int = 100

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ValueError(f"unknown toy kind {self.kind!r}, expected one of {TOY_KINDS}")
        if self.kind == "channel-swap" and self.base_shape[0] != 3:
            raise ValueError("channel-swap needs 3-channel images")
        if not 2 <= self.num_classes <= 4:
            raise ValueError("toy domains support 2 to 4 classes")


def _render_glyph(canvas: np.ndarray, cls: int, rng: np.random.Generator) -> None:
    """Draw one class-distinctive bright glyph with jittered placement."""
    h, w = canvas.shape
    cy = rng.integers(h // 4, 3 * h // 4)
    cx = rng.integers(w // 4, 3 * w // 4)
    half = rng.integers(max(2, h // 6), max(3, h // 4) + 1)
    bright = rng.integers(215, 245)
    ys, xs = np.ogrid[:h, :w]
    if cls == 0:  # filled square
        mask = (abs(ys - cy) <= half) & (abs(xs - cx) <= half)
    elif cls == 1:  # plus sign
        arm = max(1, half // 2)
        mask = ((abs(ys - cy) <= arm) & (abs(xs - cx) <= 2 * half)) | (
            (abs(xs - cx) <= arm) & (abs(ys - cy) <= 2 * half)
        )
    elif cls == 2:  # hollow ring
        dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        mask = (dist <= half + 1) & (dist >= max(1, half - 1))
    else:  # diagonal stripe
        mask = abs((ys - cy) - (xs - cx)) <= max(1, half // 2)
    canvas[mask] = bright


def _render_class_images(spec: ToyDomainSpec, count_per_class: int,
                         rng: np.random.Generator) -> tuple:
    c, h, w = spec.base_shape
    n = count_per_class * spec.num_classes
    images = np.zeros((n, c, h, w), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.num_classes), count_per_class).astype(np.int64)
    for i, cls in enumerate(labels):
        background = rng.integers(15, 35)
        canvas = np.full((h, w), background, dtype=np.uint8)
        _render_glyph(canvas, int(cls), rng)
        noise = rng.integers(-8, 9, size=(h, w))
        canvas = np.clip(canvas.astype(np.int64) + noise, 0, 255).astype(np.uint8)
        images[i] = canvas[None, :, :] if c == 1 else np.stack([canvas] * c)
    order = rng.permutation(n)
    return images[order], labels[order]


def toy_transform(spec: ToyDomainSpec, images: np.ndarray) -> np.ndarray:
    """Apply the domain shift in uint8 space; inversion is exactly involutive."""
    if spec.kind == "intensity-inversion":
        return (255 - images.astype(np.int64)).astype(np.uint8)
    if spec.kind == "channel-swap":
        return images[:, [1, 2, 0], :, :]
    # additive-stripe-noise: fixed-period horizontal bands
    h = images.shape[-2]
    stripe = (60 * ((np.arange(h) // 2) % 2)).astype(np.int64)
    shifted = images.astype(np.int64) + stripe[None, None, :, None]
    return np.clip(shifted, 0, 255).astype(np.uint8)


def make_toy_pair(spec: ToyDomainSpec) -> tuple:
    """Build (source, target) :class:`DomainData` for a toy shift.

    Target images are the domain transform applied to fresh renders of the
    same seeded procedure, so the pair is exactly distribution-matched and
    the inversion toy satisfies mean(target) == -mean(source) in [-1, 1]
    coordinates.
    """
    def render_base():
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        train = _render_class_images(spec, spec.samples_per_class, rng)
        test = _render_class_images(spec, spec.test_samples_per_class, rng)
        return train, test

    built = {}
    for domain in ("source", "target"):
        (train_images, train_labels), (test_images, test_labels) = render_base()
        if domain == "target":
            train_images = toy_transform(spec, train_images)
            test_images = toy_transform(spec, test_images)
        name = f"toy-{spec.kind}-{domain}"
        built[domain] = DomainData(
            name=name,
            train=ImageDataset.build(name, "train", train_images, train_labels,
                                     spec.num_classes),
            test=ImageDataset.build(name, "test", test_images, test_labels,
                                    spec.num_classes),
        )
    return built["source"], built["target"]


# ---------------------------------------------------------------------------
# Seed-determined batch streams


def seed_mix(seed: int, *salts: int) -> int:
    """Stable derived seed for (seed, epoch, ...) streams."""
    value = np.random.SeedSequence([int(seed)] + [int(s) for s in salts])
    return int(value.generate_state(1)[0])


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(seed_mix(seed, epoch)).permutation(n)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Index batches for one epoch; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    order = epoch_permutation(n, seed, epoch)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(dataset: ImageDataset, batch_size: int, seed: int, epochs: int):
    """Yield (epoch, images, labels) torch batches over seeded per-epoch permutations."""
    for epoch in range(epochs):
        for idx in epoch_batches(len(dataset), batch_size, seed, epoch):
            yield epoch, to_tensor(dataset.images[idx]), torch.from_numpy(dataset.labels[idx])


def paired_epoch_batches(n_source: int, n_target: int, batch_size: int, seed: int,
                         epoch: int) -> list:
    """Source/target index batch pairs for one pixel-adaptation epoch.

    An epoch is one pass over the larger set; the smaller set cycles through
    repeated fresh permutations. Both streams are fully determined by
    (seed, epoch).
    """
    larger = max(n_source, n_target)
    source_stream = _cycled_indices(n_source, larger, seed, epoch, salt=1)
    target_stream = _cycled_indices(n_target, larger, seed, epoch, salt=2)
    return [
        (source_stream[i : i + batch_size], target_stream[i : i + batch_size])
        for i in range(0, larger, batch_size)
    ]


def _cycled_indices(n: int, length: int, seed: int, epoch: int, salt: int) -> np.ndarray:
    reps = []
    covered = 0
    block = 0
    while covered < length:
        rng = np.random.default_rng(seed_mix(seed, epoch, salt, block))
        reps.append(rng.permutation(n))
        covered += n
        block += 1
    return np.concatenate(reps)[:length]
