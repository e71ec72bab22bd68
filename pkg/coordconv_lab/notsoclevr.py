"""
Not-so-Clevr dataset

3136 examples, one per square center (x, y) with x, y in [4, 59], each
holding the center, a 64x64 one-hot map with a single 1 at row y, column x,
and a 64x64 image of the 9x9 square centered there. Examples are
enumerated row-major by (y, x); x is always the column index and y the row.

Splits:
- uniform: seeded shuffle of all indices, 2509 train / 627 test
- quadrant: test is every center with x >= 32 and y >= 32 (784), the
  other three quadrants train (2352)

Files:
- dataset: b'NSCLEVR1', u32 count, then per example u8 x, u8 y,
  512-byte bit-packed one-hot, 512-byte bit-packed image
- split: b'SPLIT1', u8 kind, u32 seed, u32 n_train, u32 n_test, then the
  u16 train and test index lists
- PGM sum images for visual inspection

Example:
    dataset = generate_dataset()
    split = make_split('uniform', seed=0)
    sums = split_sum_images(split, dataset)
"""

import logging
import os
import struct
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from coordconv_lab import utils
from coordconv_lab.nn_ops import ConvSpec, conv2d
from coordconv_lab.rng import STREAM_SPLIT, Rng
from coordconv_lab.tensor import Tensor

logger = logging.getLogger(__name__)

CANVAS = 64
HALF_SIDE = 4
SIDE = 2 * HALF_SIDE + 1
CENTER_MIN = HALF_SIDE
CENTER_MAX = CANVAS - 1 - HALF_SIDE
GRID = CENTER_MAX - CENTER_MIN + 1
N_EXAMPLES = GRID * GRID
UNIFORM_TRAIN = 2509
QUADRANT_EDGE = 32

SPLIT_KINDS = ('uniform', 'quadrant')

DATASET_MAGIC = b'NSCLEVR1'
SPLIT_MAGIC = b'SPLIT1'
PACKED_MAP = CANVAS * CANVAS // 8
RECORD_SIZE = 2 + 2 * PACKED_MAP


class Example(NamedTuple):
    x: int
    y: int
    onehot: np.ndarray
    image: np.ndarray

    @property
    def center(self):
        return self.x, self.y


class Split(NamedTuple):
    kind: str
    seed: int
    train_indices: np.ndarray
    test_indices: np.ndarray

    def indices(self, part: str) -> np.ndarray:
        if part == 'train':
            return self.train_indices
        if part == 'test':
            return self.test_indices
        raise ValueError(f"split part must be 'train' or 'test', got {part!r}")


class NotSoClevr:
    """Stacked centers, one-hot maps and images"""

    def __init__(self, centers: np.ndarray, onehots: np.ndarray, images: np.ndarray):
        self.centers = np.asarray(centers, dtype=np.uint8)
        self.onehots = np.asarray(onehots, dtype=np.uint8)
        self.images = np.asarray(images, dtype=np.uint8)

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, index: int) -> Example:
        x, y = self.centers[index]
        return Example(int(x), int(y), self.onehots[index], self.images[index])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def xs(self) -> np.ndarray:
        return self.centers[:, 0].astype(np.int64)

    @property
    def ys(self) -> np.ndarray:
        return self.centers[:, 1].astype(np.int64)

    def to_bytes(self) -> bytes:
        n = len(self)
        records = np.empty((n, RECORD_SIZE), dtype=np.uint8)
        records[:, :2] = self.centers
        records[:, 2:2 + PACKED_MAP] = np.packbits(self.onehots.reshape(n, -1), axis=1)
        records[:, 2 + PACKED_MAP:] = np.packbits(self.images.reshape(n, -1), axis=1)
        return DATASET_MAGIC + struct.pack('<I', n) + records.tobytes()

    @classmethod
    def from_bytes(cls, content: bytes) -> 'NotSoClevr':
        header = len(DATASET_MAGIC) + 4
        if content[:len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise ValueError(f"Bad dataset magic {content[:len(DATASET_MAGIC)]!r}")
        (n,) = struct.unpack('<I', content[len(DATASET_MAGIC):header])
        if len(content) != header + n * RECORD_SIZE:
            raise ValueError(f"Dataset holds {len(content) - header} record bytes, expected {n * RECORD_SIZE}")
        records = np.frombuffer(content, dtype=np.uint8, offset=header).reshape(n, RECORD_SIZE)
        onehots = np.unpackbits(records[:, 2:2 + PACKED_MAP], axis=1).reshape(n, CANVAS, CANVAS)
        images = np.unpackbits(records[:, 2 + PACKED_MAP:], axis=1).reshape(n, CANVAS, CANVAS)
        return cls(records[:, :2].copy(), onehots, images)

    def content_hash(self) -> str:
        return utils.git_blob_hash(self.to_bytes())


def center_grid() -> np.ndarray:
    """[3136, 2] (x, y) centers, row-major by (y, x)"""
    ys, xs = np.meshgrid(np.arange(CENTER_MIN, CENTER_MAX + 1), np.arange(CENTER_MIN, CENTER_MAX + 1), indexing='ij')
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def generate_dataset() -> NotSoClevr:
    centers = center_grid()
    xs, ys = centers[:, 0], centers[:, 1]
    n = len(centers)

    onehots = np.zeros((n, CANVAS, CANVAS), dtype=np.uint8)
    onehots[np.arange(n), ys, xs] = 1

    pixels = np.arange(CANVAS)
    rows = np.abs(pixels[None, :] - ys[:, None]) <= HALF_SIDE
    cols = np.abs(pixels[None, :] - xs[:, None]) <= HALF_SIDE
    images = (rows[:, :, None] & cols[:, None, :]).astype(np.uint8)

    logger.debug(f"Generated {n} examples")
    return NotSoClevr(centers, onehots, images)


def paint_oracle(onehots: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Paint squares by convolving one-hot maps with a 9x9 ones kernel (same padding)"""
    onehots = np.asarray(onehots)
    spec = ConvSpec(k=SIDE, c_in=1, c_out=1, padding='same', bias=False)
    kernel = Tensor(np.ones((SIDE, SIDE, 1, 1), dtype=np.float32))
    painted = []
    for start in range(0, len(onehots), chunk):
        block = Tensor(onehots[start:start + chunk, :, :, None].astype(np.float32))
        painted.append(np.rint(conv2d(block, spec, kernel).data[..., 0]).astype(np.uint8))
    return np.concatenate(painted) if painted else np.zeros((0, CANVAS, CANVAS), dtype=np.uint8)


def make_split(kind: str, seed: int = 0) -> Split:
    if kind == 'uniform':
        order = Rng(seed, STREAM_SPLIT).permutation(N_EXAMPLES)
        train, test = order[:UNIFORM_TRAIN], order[UNIFORM_TRAIN:]
    elif kind == 'quadrant':
        centers = center_grid()
        held_out = (centers[:, 0] >= QUADRANT_EDGE) & (centers[:, 1] >= QUADRANT_EDGE)
        train, test = np.flatnonzero(~held_out), np.flatnonzero(held_out)
    else:
        raise ValueError(f"split kind must be one of {SPLIT_KINDS}, got {kind!r}")
    return Split(kind, seed, np.sort(train).astype(np.int64), np.sort(test).astype(np.int64))


def split_sum_images(split: Split, dataset: Optional[NotSoClevr] = None) -> Dict[str, np.ndarray]:
    """Normalized per-pixel sums keyed train_onehot, train_image, test_onehot, test_image"""
    dataset = dataset if dataset is not None else generate_dataset()
    sums = {}
    for part in ('train', 'test'):
        indices = split.indices(part)
        for field, maps in (('onehot', dataset.onehots), ('image', dataset.images)):
            total = maps[indices].sum(axis=0, dtype=np.int64)
            sums[f"{part}_{field}"] = utils.normalize_map(total)
    return sums


def coverage_within(split: Split, max_distance: int = 2) -> float:
    """Fraction of test centers with a train center within the given Chebyshev distance"""
    centers = center_grid()
    occupied = np.zeros((CANVAS, CANVAS), dtype=bool)
    train = centers[split.train_indices]
    occupied[train[:, 1], train[:, 0]] = True
    padded = np.pad(occupied, max_distance)
    covered = 0
    for x, y in centers[split.test_indices]:
        window = padded[y:y + 2 * max_distance + 1, x:x + 2 * max_distance + 1]
        covered += bool(window.any())
    return covered / max(len(split.test_indices), 1)


# files

def write_dataset(path: str, dataset: NotSoClevr):
    utils.create_data_directory(path)
    with open(path, 'wb') as f:
        f.write(dataset.to_bytes())


def read_dataset(path: str) -> NotSoClevr:
    with open(path, 'rb') as f:
        return NotSoClevr.from_bytes(f.read())


def split_to_bytes(split: Split) -> bytes:
    header = SPLIT_MAGIC + struct.pack(
        '<BIII', SPLIT_KINDS.index(split.kind), split.seed, len(split.train_indices), len(split.test_indices))
    body = np.concatenate([split.train_indices, split.test_indices]).astype('<u2').tobytes()
    return header + body


def split_from_bytes(content: bytes) -> Split:
    if content[:len(SPLIT_MAGIC)] != SPLIT_MAGIC:
        raise ValueError(f"Bad split magic {content[:len(SPLIT_MAGIC)]!r}")
    offset = len(SPLIT_MAGIC)
    kind_code, seed, n_train, n_test = struct.unpack('<BIII', content[offset:offset + 13])
    if kind_code >= len(SPLIT_KINDS):
        raise ValueError(f"Unknown split kind code {kind_code}")
    indices = np.frombuffer(content, dtype='<u2', offset=offset + 13).astype(np.int64)
    if len(indices) != n_train + n_test:
        raise ValueError(f"Split holds {len(indices)} indices, expected {n_train + n_test}")
    return Split(SPLIT_KINDS[kind_code], seed, indices[:n_train], indices[n_train:])


def write_split(path: str, split: Split):
    utils.create_data_directory(path)
    with open(path, 'wb') as f:
        f.write(split_to_bytes(split))


def read_split(path: str) -> Split:
    with open(path, 'rb') as f:
        return split_from_bytes(f.read())


def write_sum_images(out_dir: str, dataset: NotSoClevr, splits: List[Split], scale: int = 1) -> List[str]:
    """One PGM per split kind, part and field; returns the written paths"""
    paths = []
    for split in splits:
        for key, values in split_sum_images(split, dataset).items():
            path = os.path.join(out_dir, f"{split.kind}_{key}_sum.pgm")
            utils.write_pgm(path, values, scale=scale)
            paths.append(path)
    return paths
