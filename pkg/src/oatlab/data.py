"""Desk-scale datasets: procedural glyphs and IDX (MNIST-style) files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IDXParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W), float32 in [0, 1]
    labels: np.ndarray  # (N,), int64
    num_classes: int = 10
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


# ---------------------------------------------------------------------------
# procedural glyphs

def _glyph_bank(box: int) -> np.ndarray:
    """Ten binary box x box patterns: lines, crosses, rings, corners, ..."""
    g = np.zeros((10, box, box), dtype=np.float32)
    m, e = box // 2, box - 1
    yy, xx = np.mgrid[:box, :box]
    r = np.hypot(yy - e / 2, xx - e / 2)
    g[0, m - 1:m + 1, :] = 1                                   # horizontal bar
    g[1, :, m - 1:m + 1] = 1                                   # vertical bar
    g[2][np.abs(yy - xx) <= 0.5] = 1                           # diagonal
    g[3][np.abs(yy + xx - e) <= 0.5] = 1                       # anti-diagonal
    g[4, m - 1:m + 1, :] = 1                                   # plus
    g[4, :, m - 1:m + 1] = 1
    g[5][(np.abs(yy - xx) <= 0.5) | (np.abs(yy + xx - e) <= 0.5)] = 1  # cross
    g[6][np.abs(r - e / 2 + 0.5) <= 0.7] = 1                   # ring
    g[7, :2, :] = 1                                            # corner (top-left)
    g[7, :, :2] = 1
    g[8, :2, :] = 1                                            # T
    g[8, :, m - 1:m + 1] = 1
    g[9][r <= e / 4 + 0.5] = 1                                 # filled blob
    return g


def synth_glyphs(n_per_class: int, classes: int = 10, size: int = 16, noise_sigma: float = 0.15,
                 seed: int = 0, contrast: float = 0.6, background: float = 0.2,
                 split: str = "train", cue: float = 0.0, swap_prob: float = 0.0) -> Dataset:
    """Render ``classes`` glyph patterns at random +-2 px offsets plus clipped Gaussian noise.

    Deterministic for a given seed.  Samples are interleaved by class.

    Two optional knobs create a task where accuracy and robustness conflict.
    Classes pair up as ``(k, k ^ 1)``.  ``swap_prob`` draws the glyph of the
    partner class instead, so the glyph alone names the pair but not the
    member.  ``cue`` shifts the whole image by ``+cue/2`` for odd labels and
    ``-cue/2`` for even ones; glyph strokes are made zero-mean so the image
    mean carries nothing else.  A cue below ``2 * epsilon`` is predictive yet
    within reach of an L-inf adversary.
    """
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    if not 1 <= classes <= 10:
        raise ValueError(f"between 1 and 10 classes are available, got {classes}")
    if not 0.0 <= swap_prob <= 1.0:
        raise ValueError(f"swap_prob must lie in [0, 1], got {swap_prob}")
    rng = np.random.default_rng(seed)
    box = size - 6
    bank = _glyph_bank(box)[:classes]
    n = n_per_class * classes
    labels = np.tile(np.arange(classes), n_per_class)
    offsets = rng.integers(-2, 3, size=(n, 2))
    noise = rng.standard_normal((n, size, size)) if noise_sigma > 0 else None
    glyphs = labels.copy()
    if swap_prob > 0:
        # drawn after the noise so the default stream is unchanged
        swap = (rng.random(n) < swap_prob) & ((labels ^ 1) < classes)
        glyphs[swap] ^= 1
    level = background + cue * ((labels % 2) - 0.5)
    images = np.broadcast_to(level.reshape(n, 1, 1, 1), (n, 1, size, size)).astype(np.float64)
    if cue:
        # zero-mean strokes keep the image mean free of glyph area, leaving the cue as its only signal
        bank = bank - bank.mean(axis=(1, 2), keepdims=True)
    for i in range(n):
        oy, ox = 3 + offsets[i]
        images[i, 0, oy:oy + box, ox:ox + box] += contrast * bank[glyphs[i]]
    if noise is not None:
        images[:, 0] += noise_sigma * noise
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), classes, split)


# ---------------------------------------------------------------------------
# IDX files

def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IDXParseError(path, len(buf), f"truncated header, need {need} bytes")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IDXParseError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Parse a big-endian IDX image/label file pair; pixels are scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf = images_path.read_bytes()
    lbuf = labels_path.read_bytes()
    n, rows, cols = _read_header(ibuf, images_path, IDX_IMAGE_MAGIC, 3)
    (nl,) = _read_header(lbuf, labels_path, IDX_LABEL_MAGIC, 1)
    payload = n * rows * cols
    if len(ibuf) < 16 + payload:
        raise IDXParseError(images_path, len(ibuf), f"truncated payload, expected {16 + payload} bytes")
    if len(lbuf) < 8 + nl:
        raise IDXParseError(labels_path, len(lbuf), f"truncated payload, expected {8 + nl} bytes")
    if nl != n:
        raise IDXParseError(labels_path, 4, f"label count {nl} does not match image count {n}")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=payload, offset=16)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=nl, offset=8).astype(np.int64)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, rows, cols)
    return Dataset(images, labels, num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# batching

class BatchIterator:
    """Shuffled mini-batches; the permutation of each epoch depends only on (seed, epoch)."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self._order = self._permutation(0)
        self._pos = 0

    def _permutation(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def _roll(self) -> None:
        if self._pos >= len(self._order):
            self.epoch += 1
            self._order = self._permutation(self.epoch)
            self._pos = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        self._roll()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(idx)
        return self.dataset.images[idx], self.dataset.labels[idx]

    def epoch_batches(self):
        """Yield the batches of the current epoch (the next one if this is exhausted)."""
        self._roll()
        while self._pos < len(self._order):
            yield self.next_batch()


def next_batch(it: BatchIterator) -> tuple[np.ndarray, np.ndarray]:
    return it.next_batch()
