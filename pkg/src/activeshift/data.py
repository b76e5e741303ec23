"""CIFAR binary readers, augmentation and synthetic shift-recovery data."""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError

IMAGE_BYTES = 3 * 32 * 32
LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
CIFAR_FILES = {
    ("cifar10", "train"): ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)]),
    ("cifar10", "test"): ("cifar-10-batches-bin", ["test_batch.bin"]),
    ("cifar100", "train"): ("cifar-100-binary", ["train.bin"]),
    ("cifar100", "test"): ("cifar-100-binary", ["test.bin"]),
}
DATA_ROOT_ENV = "ASL_DATA_ROOT"


@dataclass
class CifarRecords:
    images: np.ndarray  # uint8 (N, 3, 32, 32)
    labels: np.ndarray  # int64 (N,)
    coarse: np.ndarray | None = None  # CIFAR-100 coarse labels


def parse_cifar(raw: bytes, source="cifar10") -> CifarRecords:
    label_bytes = LABEL_BYTES[source]
    rec = label_bytes + IMAGE_BYTES
    if len(raw) % rec:
        whole = len(raw) // rec
        raise FormatError(f"{source}: truncated record #{whole} ({len(raw) - whole * rec} of {rec} bytes)", offset=whole * rec)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    if source == "cifar100":
        return CifarRecords(images, arr[:, 1].astype(np.int64), arr[:, 0].astype(np.int64))
    return CifarRecords(images, arr[:, 0].astype(np.int64))


def read_cifar_file(path, source="cifar10") -> CifarRecords:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return parse_cifar(raw, source)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None


def serialize_cifar(records: CifarRecords, source="cifar10") -> bytes:
    n = len(records.labels)
    label_bytes = LABEL_BYTES[source]
    out = np.empty((n, label_bytes + IMAGE_BYTES), dtype=np.uint8)
    if source == "cifar100":
        coarse = records.coarse if records.coarse is not None else np.zeros(n, dtype=np.int64)
        out[:, 0] = coarse
        out[:, 1] = records.labels
    else:
        out[:, 0] = records.labels
    out[:, label_bytes:] = records.images.reshape(n, IMAGE_BYTES)
    return out.tobytes()


def write_cifar_file(path, records: CifarRecords, source="cifar10"):
    with open(path, "wb") as fh:
        fh.write(serialize_cifar(records, source))


def resolve_data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given (use --data-root or set {DATA_ROOT_ENV})")
    return Path(root)


def cifar_paths(root, source, split):
    try:
        subdir, names = CIFAR_FILES[(source, split)]
    except KeyError:
        raise ValueError(f"unknown dataset/split {source}/{split}") from None
    root = Path(root)
    for base in (root / subdir, root):
        paths = [base / name for name in names]
        if all(p.is_file() for p in paths):
            return paths
    raise FileNotFoundError(f"{source} {split} files {names} not found under {root}")


def read_cifar_split(root, source="cifar10", split="train") -> CifarRecords:
    parts = [read_cifar_file(p, source) for p in cifar_paths(root, source, split)]
    coarse = None if parts[0].coarse is None else np.concatenate([p.coarse for p in parts])
    return CifarRecords(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        coarse,
    )


def channel_stats(images: np.ndarray):
    """Per-channel mean and std of uint8 images, in [0, 1] units."""
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    return ((x - np.asarray(mean, np.float32)[:, None, None]) / np.asarray(std, np.float32)[:, None, None]).astype(dtype)


@dataclass
class DatasetSpec:
    source: str = "cifar10"  # cifar10 | cifar100 | synthetic-shift
    path: str | None = None
    split: str = "train"
    batch_size: int = 128
    augment: bool = True
    mean: tuple | None = None
    std: tuple | None = None
    seed: int = 0


@dataclass
class Dataset:
    x: np.ndarray  # normalized float (N, 3, 32, 32)
    y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)


def load_cifar(spec: DatasetSpec, dtype=np.float32, limit=None) -> Dataset:
    """Read a split and normalize it with train-split statistics (unless given)."""
    root = resolve_data_root(spec.path)
    records = read_cifar_split(root, spec.source, spec.split)
    if spec.mean is None or spec.std is None:
        train = records if spec.split == "train" else read_cifar_split(root, spec.source, "train")
        mean, std = channel_stats(train.images)
    else:
        mean, std = np.asarray(spec.mean), np.asarray(spec.std)
    images, labels = records.images, records.labels
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    classes = 10 if spec.source == "cifar10" else 100
    return Dataset(normalize(images, mean, std, dtype), labels, mean, std, classes)


def augment(images: np.ndarray, rng, pad=4, enabled=True) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size and flip with p = 0.5.

    Works on a single (C, H, W) image or an (N, C, H, W) batch.
    """
    if not enabled:
        return images
    single = images.ndim == 3
    batch = images[None] if single else images
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = batch
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i, ((r, s), flip) in enumerate(zip(offsets, flips)):
        crop = padded[i, :, r:r + h, s:s + w]
        out[i] = crop[:, :, ::-1] if flip else crop
    return out[0] if single else out


def batch_indices(n, batch_size, iteration, seed):
    """Indices of batch ``iteration``: consecutive slices of per-epoch permutations.

    A pure function of its arguments, so a resumed run sees exactly the
    batches an uninterrupted one would.
    """
    start = iteration * batch_size
    idx = []
    while len(idx) < batch_size:
        epoch, pos = divmod(start + len(idx), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(idx), n - pos)
        idx.extend(perm[pos:pos + take])
    return np.asarray(idx)


def train_batches(data: Dataset, batch_size, seed, start=0, stop=None, augment_on=True):
    """Yield ``(iteration, x, y)`` for iterations ``start .. stop - 1``."""
    it = start
    while stop is None or it < stop:
        idx = batch_indices(len(data), batch_size, it, seed)
        rng = np.random.default_rng([seed, 1, it])
        yield it, augment(data.x[idx], rng, enabled=augment_on), data.y[idx]
        it += 1


def prefetch(iterable, size=2):
    """Run ``iterable`` in a producer thread, handing items over a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# -- synthetic shift-recovery task ---------------------------------------------

def smooth_images(count, size=32, sigma=2.0, seed=None, dtype=np.float64):
    """Low-pass filtered white noise, rescaled to unit variance, shape (count, 1, size, size)."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((count, size, size))
    imgs = np.stack([ndimage.gaussian_filter(im, sigma, mode="wrap") for im in noise])
    imgs /= imgs.std()
    return imgs[:, None].astype(dtype)


def reference_shift(images, alpha, beta):
    """Bilinear resampling at (m + alpha, n + beta) with zeros outside the image.

    Uses scipy's spline interpolation (order 1) as an implementation
    independent of :func:`activeshift.shift.asl_forward`.
    """
    out = np.empty_like(images)
    h, w = images.shape[-2:]
    rows, cols = np.meshgrid(np.arange(h) + alpha, np.arange(w) + beta, indexing="ij")
    coords = np.stack([rows, cols])
    for idx in np.ndindex(images.shape[:-2]):
        out[idx] = ndimage.map_coordinates(images[idx], coords, order=1, mode="grid-constant", cval=0.0)
    return out


def gen_shift_task(true_shift, count=8, seed=0, size=32, sigma=2.0):
    """Pairs (X, Y) of smooth images and their copies shifted by ``true_shift``."""
    alpha, beta = true_shift
    if abs(alpha) > 8 or abs(beta) > 8:
        raise ValueError("true shift must satisfy |alpha|, |beta| <= 8")
    x = smooth_images(count, size, sigma, seed)
    return x, reference_shift(x, alpha, beta)
