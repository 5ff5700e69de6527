"""Byte-mapped grayscale images, PGM I/O, and labelled image directories."""

from __future__ import annotations

import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class Label(IntEnum):
    BENIGN = 0
    MALWARE = 1


CLASS_DIRS = {"benign": Label.BENIGN, "malware": Label.MALWARE}


class DataError(Exception):
    """Unreadable or malformed input data."""


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"pixel array {self.pixels.shape} does not match {self.height}x{self.width}")

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)

    def __eq__(self, other):
        return (isinstance(other, GrayImage) and self.width == other.width
                and self.height == other.height and np.array_equal(self.pixels, other.pixels))


class Item(NamedTuple):
    image: GrayImage
    label: Label
    source: str


@dataclass
class LabeledDataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> Item:
        return self.items[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(it.label) for it in self.items], dtype=np.int64)

    @property
    def counts(self) -> tuple:
        """(benign, malware)."""
        y = self.labels
        return int(np.sum(y == Label.BENIGN)), int(np.sum(y == Label.MALWARE))

    def to_batch(self, side: int, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Resize to ``side`` and stack as uint8 ``(n, side, side)``."""
        idx = range(len(self.items)) if indices is None else indices
        if len(idx) == 0:
            return np.zeros((0, side, side), dtype=np.uint8)
        return np.stack([resize_nearest(self.items[i].image, side).pixels for i in idx])


# --------------------------------------------------------------------------
# byte mapping


def bytes_to_image(blob: bytes) -> GrayImage:
    """Lay the bytes out row-major in a near-square grid, zero-padding the tail.

    width = ceil(sqrt(len)), height = ceil(len / width).
    """
    n = len(blob)
    if n == 0:
        raise DataError("cannot map an empty byte sequence to an image")
    width = math.isqrt(n)
    if width * width < n:
        width += 1
    height = -(-n // width)
    flat = np.zeros(width * height, dtype=np.uint8)
    flat[:n] = np.frombuffer(bytes(blob), dtype=np.uint8)
    return GrayImage(width, height, flat.reshape(height, width))


def image_to_bytes(img: GrayImage, length: int) -> bytes:
    return img.pixels.reshape(-1)[:length].tobytes()


def resize_nearest(img: GrayImage, side: int) -> GrayImage:
    """Nearest-neighbour resample to ``side`` x ``side``; source index = floor(dst * extent / side)."""
    if side < 1:
        raise ValueError("side must be >= 1")
    if img.width == side and img.height == side:
        return img
    rows = (np.arange(side) * img.height) // side
    cols = (np.arange(side) * img.width) // side
    return GrayImage(side, side, img.pixels[np.ix_(rows, cols)])


# --------------------------------------------------------------------------
# PGM (binary P5, maxval 255)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def encode_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def decode_pgm(data: bytes, name: str = "<bytes>") -> GrayImage:
    pos, tokens = 0, []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{name}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{name}: not a binary PGM (magic {tokens[0][:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{name}: non-numeric PGM header field") from None
    if maxval != 255:
        raise DataError(f"{name}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise DataError(f"{name}: empty image {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError(f"{name}: missing whitespace after PGM header")
    pos += 1
    body = data[pos:pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{name}: expected {width * height} pixel bytes, found {len(body)}")
    return GrayImage(width, height, np.frombuffer(body, dtype=np.uint8).reshape(height, width))


def write_pgm(path, img: GrayImage):
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path) -> GrayImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from e
    return decode_pgm(data, str(path))


# --------------------------------------------------------------------------
# datasets


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DSBEL_THREADS", "1")))
    except ValueError:
        return 1


def load_dataset(root) -> LabeledDataset:
    """Read ``root/benign/*.pgm`` and ``root/malware/*.pgm``.

    Files are visited in lexicographic order per class (benign first).  Any
    unreadable or non-PGM file aborts the load with its filename in the message.
    """
    root = Path(root)
    jobs = []
    for dirname, label in CLASS_DIRS.items():
        sub = root / dirname
        if not sub.is_dir():
            raise DataError(f"{root}: missing '{dirname}/' subdirectory")
        files = sorted(p for p in sub.iterdir() if p.is_file())
        if not files:
            log.warning("%s: no images in %s/", root, dirname)
        jobs.extend((p, label) for p in files)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(lambda job: read_pgm(job[0]), jobs))
    items = [Item(img, label, str(p.relative_to(root))) for img, (p, label) in zip(images, jobs)]
    return LabeledDataset(items)


def save_dataset(ds: LabeledDataset, root):
    root = Path(root)
    for dirname in CLASS_DIRS:
        (root / dirname).mkdir(parents=True, exist_ok=True)
    names = {v: k for k, v in CLASS_DIRS.items()}
    for k, item in enumerate(ds.items):
        stem = Path(item.source).stem or f"img{k:05d}"
        write_pgm(root / names[item.label] / f"{stem}.pgm", item.image)


# --------------------------------------------------------------------------
# procedural corpora


def _banded(rng, side, noise):
    values = np.empty(side)
    pos = 0
    while pos < side:
        width = int(rng.integers(2, 9))
        values[pos:pos + width] = rng.integers(0, 256)
        pos += width
    img = np.repeat(values[:, None], side, axis=1)  # constant along rows
    img += rng.normal(0.0, noise, (side, side))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_corpus(n_per_class: int, side: int = 64, seed: int = 0,
                              noise: float = 24.0) -> LabeledDataset:
    """Desk-scale stand-in for a benign/malware image corpus.

    Benign images are horizontally banded byte textures (each row roughly
    constant), malware images vertically banded; both carry Gaussian noise.
    Band widths and intensities are random, so neither class is separable by
    brightness alone.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n_per_class):
        items.append(Item(GrayImage.from_array(_banded(rng, side, noise)), Label.BENIGN, f"benign/syn{k:05d}"))
    for k in range(n_per_class):
        items.append(Item(GrayImage.from_array(_banded(rng, side, noise).T), Label.MALWARE, f"malware/syn{k:05d}"))
    return LabeledDataset(items)


def generate_surrogate_corpus(n_per_class: int, side: int = 64, seed: int = 0,
                              noise: float = 16.0) -> LabeledDataset:
    """Texture task for auxiliary-stem pretraining: diagonal stripes vs. checkerboards."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    ii, jj = np.mgrid[0:side, 0:side]
    items = []
    for cls in (0, 1):
        for k in range(n_per_class):
            lo, hi = sorted(rng.integers(0, 256, 2))
            hi = max(hi, lo + 64)
            if cls == 0:
                period = int(rng.integers(4, 13))
                sign = 1 if rng.random() < 0.5 else -1
                on = ((ii + sign * jj + int(rng.integers(0, period))) % period) < period // 2
            else:
                cell = int(rng.integers(2, 9))
                on = ((ii // cell + jj // cell) % 2) == 0
            img = np.where(on, hi, lo) + rng.normal(0.0, noise, (side, side))
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            items.append(Item(GrayImage.from_array(img), Label(cls), f"surrogate/{cls}_{k:05d}"))
    return LabeledDataset(items)
