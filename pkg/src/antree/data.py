"""Dataset loading (IDX, CSV), splitting, preprocessing and augmentation."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tree import CLASSIFICATION, REGRESSION, Task

IDX_UBYTE = 0x08
_GZIP_MAGIC = b"\x1f\x8b"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [N, ...]
    targets: np.ndarray  # [N] class indices or [N, D] regression targets
    task: Task

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("a dataset needs at least one sample")
        if len(self.inputs) != len(self.targets):
            raise ValueError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets"
            )

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.task)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data file not found: {p}")
    raw = p.read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file holding unsigned bytes into an ndarray of uint8."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    z0, z1, dtype, ndim = raw[:4]
    if z0 != 0 or z1 != 0:
        raise DataFormatError(f"{path}: bad magic bytes {raw[:2].hex()} at byte offset 0")
    if dtype != IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported IDX dtype 0x{dtype:02x} at byte offset 2")
    if ndim == 0:
        raise DataFormatError(f"{path}: zero dimensions at byte offset 3")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension table at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + math.prod(dims)
    if len(raw) < need:
        raise DataFormatError(
            f"{path}: truncated payload, expected {need} bytes, file ends at byte offset {len(raw)}"
        )
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes after byte offset {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    payload = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    p = Path(path)
    if compress is None:
        compress = p.suffix == ".gz"
    p.write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be one-dimensional, got {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds "
            f"{labels.shape[0]} labels (count at byte offset 4)"
        )
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DataFormatError(f"{images_path}: expected 3 or 4 dimensions, got {images.ndim}")
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside {num_classes} classes")
    return Dataset(
        images.astype(np.float64) / 255.0,
        labels.astype(np.int64),
        Task.classification(num_classes),
    )


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, input_cols: int, target_cols: int) -> Dataset:
    """Rows of ``input_cols`` inputs followed by ``target_cols`` regression targets.

    A first row that is not entirely numeric is treated as a header.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data file not found: {p}")
    width = input_cols + target_cols
    rows = []
    with open(p, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if len(row) != width:
                raise DataFormatError(f"{p}: row {lineno} has {len(row)} fields, expected {width}")
            vals = []
            for col, c in enumerate(row, start=1):
                try:
                    vals.append(float(c))
                except ValueError:
                    raise DataFormatError(f"{p}: non-numeric field {c!r} at row {lineno}, column {col}") from None
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{p}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :input_cols], arr[:, input_cols:], Task.regression(target_cols))


def split_train_val(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded uniform split; the first ceil(N * fraction) permuted samples validate."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(data)
    n_val = math.ceil(n * val_fraction)
    if n_val >= n:
        raise ValueError(f"cannot hold out {n_val} of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


MEAN_SUBTRACT = "mean_subtract"
NO_PREPROCESS = "none"


def fit_mean(train: Dataset, per_feature: bool = False) -> np.ndarray:
    """Input mean of the training portion: one scalar, or one value per feature."""
    axis = 0 if per_feature else None
    mean = train.inputs.mean(axis=axis)
    # one correction pass removes the rounding left by the first summation
    mean = mean + (train.inputs - mean).mean(axis=axis)
    return np.asarray(mean)


def preprocess(data: Dataset, policy: str, mean: np.ndarray | None = None) -> Dataset:
    if policy in (None, NO_PREPROCESS):
        return data
    if policy != MEAN_SUBTRACT:
        raise ValueError(f"unknown preprocessing policy {policy!r}")
    if mean is None:
        mean = fit_mean(data)
    return Dataset(data.inputs - mean, data.targets, data.task)


PAD_CROP_FLIP = "pad_crop_flip"


def augment(inputs: np.ndarray, policy: str | None, seed: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop back at a uniform offset, flip with p=0.5."""
    if policy in (None, "none"):
        return inputs
    if policy != PAD_CROP_FLIP:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    if inputs.ndim != 4:
        raise ValueError(f"pad/crop/flip augmentation needs [N,C,H,W] images, got {inputs.shape}")
    rng = np.random.default_rng(seed)
    n, _, h, w = inputs.shape
    padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(inputs)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def check_task(data: Dataset, task: Task) -> None:
    if data.task.kind != task.kind:
        raise ValueError(f"dataset is {data.task.kind} but the model is {task.kind}")
    if task.kind == CLASSIFICATION:
        if data.targets.size and (data.targets.min() < 0 or data.targets.max() >= task.dim):
            raise ValueError(f"labels fall outside the model's {task.dim} classes")
    elif task.kind == REGRESSION and data.targets.shape[1:] != (task.dim,):
        raise ValueError(f"targets have shape {data.targets.shape[1:]}, model predicts {task.dim}")
