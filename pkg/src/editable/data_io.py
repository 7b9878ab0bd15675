"""Datasets, file-format loaders and binary checkpoints.

Binary layouts
--------------
Checkpoint (``EDNN``), all integers little-endian::

    b"EDNN" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64)
                | u8 rank | u32 dims[rank] | raw little-endian data
    u32 config_len | config (utf-8 JSON)

Descriptor matrix (``EDDM``)::

    b"EDDM" | u32 rows | u32 cols | f32 data, row-major
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .editors import EditorConfig
from .models import ModelConfig, ParamSet

CKPT_MAGIC = b"EDNN"
CKPT_VERSION = 1
DDM_MAGIC = b"EDDM"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise ValueError("features must be N x d with one label per row")
        if len(labels) == 0:
            raise ValueError("dataset is empty")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.num_classes)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.features.astype(dtype), self.labels, self.num_classes)


def gen_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float = 1.0,
    seed: int = 0,
    center_scale: float = 1.0,
) -> Dataset:
    """Balanced Gaussian blobs around seed-determined class centers."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(num_classes, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centers[labels] + spread * rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes)


def blob_twins(
    num_classes: int,
    count: int,
    dim: int,
    noise: float,
    seed: int = 0,
    center_scale: float = 1.0,
    spread: float = 1.0,
    blob_seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Pairs of inputs sharing one latent blob sample, each with its own noise.

    Uses the same class centers as ``gen_blobs(..., seed=blob_seed)``.  Each
    pair carries the latent sample's true class; callers pick edit targets.
    """
    centers = np.random.default_rng(blob_seed).normal(scale=center_scale, size=(num_classes, dim))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        c = int(rng.integers(num_classes))
        latent = centers[c] + spread * rng.normal(size=dim)
        a = latent + noise * rng.normal(size=dim)
        b = latent + noise * rng.normal(size=dim)
        out.append((a, b, c))
    return out


def split(dataset: Dataset, first: int, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint split into ``first`` rows and the remainder."""
    idx_a, idx_b = split_indices(len(dataset), first, seed)
    return dataset.subset(idx_a), dataset.subset(idx_b)


def split_indices(n: int, first: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < first < n:
        raise ValueError(f"split size {first} must lie strictly between 0 and {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:first]), np.sort(perm[first:])


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Zero-mean unit-variance features using train statistics only."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [
        Dataset(((d.features - mu) / sd).astype(d.features.dtype), d.labels, d.num_classes)
        for d in (train, *others)
    ]


# -- image formats -----------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(path, len(raw), "truncated IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(path, 0, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, len(raw), "truncated IDX dimension sizes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(path, len(raw), f"truncated IDX data: need {header + size} bytes")
    if len(raw) > header + size:
        raise FormatError(path, header + size, "trailing bytes after IDX data")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """MNIST-style IDX image and label files; pixels scaled to [0, 1]."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    features = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return Dataset(features, labels.astype(np.int64), num_classes)


def load_cifar_binary(paths: Sequence) -> Dataset:
    """CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes."""
    feats, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(path, len(raw) - len(raw) % CIFAR_RECORD,
                              f"length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            bad = int(np.argmax(records[:, 0] > 9))
            raise FormatError(path, bad * CIFAR_RECORD, f"label {records[bad, 0]} out of range")
        labels.append(records[:, 0].astype(np.int64))
        feats.append(records[:, 1:].astype(np.float32) / 255.0)
    if not feats:
        raise ValueError("no CIFAR files given")
    return Dataset(np.concatenate(feats), np.concatenate(labels), 10)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config_text: str) -> None:
    """Write named tensors plus a JSON config string in the EDNN layout."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"{name}: name too long or rank too high")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    cfg = config_text.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(path, pos, f"truncated while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError(path, 0, "bad checkpoint magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(path, 4, f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _CODE_DTYPES:
            raise FormatError(path, pos - 2, f"unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(take(nbytes, f"data of {name}"), dtype=dt).reshape(dims)
        if name in tensors:
            raise FormatError(path, pos, f"duplicate tensor name {name!r}")
        tensors[name] = data.astype(dt.newbyteorder("="))
    (clen,) = struct.unpack("<I", take(4, "config length"))
    config = take(clen, "config").decode("utf-8")
    if pos != len(raw):
        raise FormatError(path, pos, "trailing bytes after config")
    return tensors, config


def save_matrix(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    Path(path).write_bytes(
        DDM_MAGIC + struct.pack("<II", *m.shape) + np.ascontiguousarray(m, dtype="<f4").tobytes()
    )


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(path, len(raw), "truncated matrix header")
    if raw[:4] != DDM_MAGIC:
        raise FormatError(path, 0, "bad descriptor matrix magic")
    rows, cols = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * rows * cols
    if len(raw) != need:
        raise FormatError(path, min(len(raw), need), f"expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)


# -- model checkpoints -----------------------------------------------------------

EDITOR_TENSORS = ("editor.log_alpha", "editor.beta_logit")


@dataclass
class ModelCheckpoint:
    model: ModelConfig
    params: ParamSet
    editor: EditorConfig
    run: dict = field(default_factory=dict)


def save_model_checkpoint(path, model: ModelConfig, params: ParamSet, editor_cfg: EditorConfig,
                          run_cfg: Mapping | None = None) -> None:
    """Params, editor step-size tensors and the configs as one EDNN file."""
    tensors = dict(params.arrays())
    hp = editor_cfg.hyperparams(np.float64)
    tensors[EDITOR_TENSORS[0]] = hp.log_alpha.data
    tensors[EDITOR_TENSORS[1]] = hp.beta_logit.data
    config = {
        "model": model.to_dict(),
        "editor": editor_cfg.to_dict(),
        "editable_mask": sorted(params.editable_mask),
        "run": dict(run_cfg or {}),
    }
    save_checkpoint(path, tensors, json.dumps(config, sort_keys=True))


def load_model_checkpoint(path) -> ModelCheckpoint:
    tensors, text = load_checkpoint(path)
    try:
        config = json.loads(text)
        model = ModelConfig.from_dict(config["model"])
        editor = EditorConfig.from_dict(config["editor"])
        mask = config["editable_mask"]
        run = config.get("run", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(path, 0, f"bad embedded config: {exc}") from None
    arrays = {k: v for k, v in tensors.items() if k not in EDITOR_TENSORS}
    expected = set(model.group_names)
    if {k.split(".", 1)[0] for k in arrays} != expected:
        raise FormatError(path, 0, "tensor groups do not match the model config")
    return ModelCheckpoint(model, ParamSet.from_arrays(arrays, mask), editor, run)
