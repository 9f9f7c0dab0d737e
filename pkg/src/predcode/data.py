"""Datasets: IDX ingestion, subsetting, synthetic teacher data, corruptions.

Datasets keep one sample per column: ``inputs`` is features x samples with
values in [0, 1], ``labels`` is one-hot classes x samples (or ``None`` for
generative data).

MNIST-style files are looked up under ``$PREDCODE_DATA`` (default
``~/.cache/predcode``) as ``<name>/<file>`` or ``<name>/<file>.gz``; the
library never downloads anything itself.
"""

from __future__ import annotations

import dataclasses
import enum
import gzip
import hashlib
import math
import os
import struct
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from . import numerics as nm
from .errors import ParseError, UsageError
from .network import PCNetwork

DATA_ENV = "PREDCODE_DATA"

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder(">"): k for k, v in _IDX_TYPES.items()}

# md5 of the published .gz archives
KNOWN_MD5 = {
    "mnist": {
        "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
        "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
        "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
        "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
    },
    "fashion_mnist": {
        "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
        "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
        "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
        "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
    },
}


@dataclasses.dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    checksum: str = ""
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        x = nm.as_matrix(self.inputs)
        if not np.isfinite(x).all() or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
            raise ValueError(f"dataset {self.name!r}: inputs must be finite and within [0, 1]")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = nm.as_matrix(self.labels)
            if y.shape[1] != x.shape[1]:
                raise ValueError(f"dataset {self.name!r}: {x.shape[1]} inputs but {y.shape[1]} labels")
            if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=0) == 1)):
                raise ValueError(f"dataset {self.name!r}: labels must be one-hot columns")
            object.__setattr__(self, "labels", y)
        if self.image_shape is not None:
            h, w = self.image_shape
            if h * w != x.shape[0]:
                raise ValueError(f"image shape {self.image_shape} does not match {x.shape[0]} features")

    def __len__(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else self.labels.shape[0]

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=0)

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            np.ascontiguousarray(self.inputs[:, idx]),
            None if self.labels is None else np.ascontiguousarray(self.labels[:, idx]),
            name or self.name,
            self.checksum,
            self.image_shape,
        )


def one_hot(classes, n_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((n_classes, classes.size))
    out[classes, np.arange(classes.size)] = 1.0
    return out


# -- IDX -----------------------------------------------------------------------

def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX blob: ``00 00 <type> <ndim>``, big-endian uint32 sizes, payload."""
    if len(buf) < 4:
        raise ParseError("IDX header truncated", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise ParseError(f"bad IDX magic {buf[:4].hex()}", 0)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("IDX tensor must have at least one dimension", 3)
    off = 4 + 4 * ndim
    if len(buf) < off:
        raise ParseError("IDX dimension table truncated", len(buf))
    shape = struct.unpack(f">{ndim}I", buf[4:off])
    dtype = _IDX_TYPES[code]
    n_bytes = math.prod(shape) * dtype.itemsize
    if len(buf) - off < n_bytes:
        raise ParseError(f"IDX payload truncated: need {n_bytes} bytes, have {len(buf) - off}", len(buf))
    if len(buf) - off > n_bytes:
        raise ParseError("trailing bytes after IDX payload", off + n_bytes)
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(shape), offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def serialize_idx(arr) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder(">")
    if dtype not in _IDX_CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, _IDX_CODES[dtype], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(dtype).tobytes(order="C")


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "predcode"))


def _read_idx_file(root: Path, fname: str, name: str, verify: bool) -> tuple[np.ndarray, str]:
    plain, gz = root / fname, root / (fname + ".gz")
    if gz.exists():
        raw = gz.read_bytes()
        digest = hashlib.md5(raw).hexdigest()
        expected = KNOWN_MD5.get(name, {}).get(gz.name)
        if verify and expected is not None and digest != expected:
            raise ParseError(f"checksum mismatch for {gz}: {digest} != {expected}", 0)
        raw = gzip.decompress(raw)
    elif plain.exists():
        raw = plain.read_bytes()
        digest = hashlib.md5(raw).hexdigest()
    else:
        raise FileNotFoundError(
            f"{fname}[.gz] not found under {root}; place the {name} IDX files there "
            f"(see scripts/fetch_datasets.py) or set ${DATA_ENV}")
    return parse_idx(raw), digest


def load_idx_dataset(name: str = "mnist", split: str = "train", root=None,
                     verify: bool = True) -> Dataset:
    """Load an MNIST-layout dataset (``mnist`` or ``fashion_mnist``)."""
    root = Path(root) if root is not None else data_dir() / name
    prefix = {"train": "train", "test": "t10k"}[split]
    images, d1 = _read_idx_file(root, f"{prefix}-images-idx3-ubyte", name, verify)
    labels, d2 = _read_idx_file(root, f"{prefix}-labels-idx1-ubyte", name, verify)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ParseError(f"inconsistent IDX pair: images {images.shape}, labels {labels.shape}", 0)
    n, h, w = images.shape
    inputs = np.ascontiguousarray(images.reshape(n, h * w).T, dtype=np.float64) / 255.0
    return Dataset(inputs, one_hot(labels, 10), f"{name}-{split}", f"md5:{d1}+{d2}", (h, w))


def load_digits(split: str = "train", seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """8x8 handwritten digits bundled with scikit-learn: an offline stand-in for MNIST."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    x = bunch.data.T / 16.0
    y = one_hot(bunch.target, 10)
    perm = nm.make_rng(seed).permutation(x.shape[1])
    n_test = int(round(test_fraction * x.shape[1]))
    idx = perm[n_test:] if split == "train" else perm[:n_test]
    digest = hashlib.md5(bunch.data.tobytes()).hexdigest()
    full = Dataset(x, y, "digits", f"md5:{digest}", (8, 8))
    return full.take(np.sort(idx), f"digits-{split}")


def subset(dataset: Dataset, n: int, seed: int, stratified: bool = False) -> Dataset:
    """Seeded sample of ``n`` columns; ``stratified`` balances classes (remainder to low classes)."""
    total = len(dataset)
    if n > total or n < 0:
        raise UsageError(f"cannot take {n} samples from a dataset of {total}")
    rng = nm.make_rng(seed)
    if not stratified:
        return dataset.take(rng.permutation(total)[:n], f"{dataset.name}[{n}]")
    if dataset.labels is None:
        raise UsageError("stratified subsets need labels")
    classes = dataset.class_indices
    k = dataset.n_classes
    quota = [n // k + (1 if c < n % k else 0) for c in range(k)]
    picked = []
    for c in range(k):
        members = np.flatnonzero(classes == c)
        if quota[c] > members.size:
            raise UsageError(f"class {c} has only {members.size} samples, need {quota[c]}")
        picked.append(rng.permutation(members)[:quota[c]])
    idx = rng.permutation(np.concatenate(picked))
    return dataset.take(idx, f"{dataset.name}[{n},strat]")


# -- synthetic teacher data ----------------------------------------------------

def synthetic_generative(n: int, dims, seed: int, activation: str = "tanh",
                         return_teacher: bool = False):
    """Samples of a random PC teacher network, mapped into [0, 1].

    The last unit of every layer above 0 is held at a constant drive, which
    gives each layer an effective bias. The data layer's weights are scaled
    so that ``mu[0] = 0.5 + (something in [-0.5, 0.5])``; samples are
    therefore exact teacher predictions and the teacher, given its own
    latents, has zero energy on them.

    With ``return_teacher`` the result is ``(dataset, teacher, latents)``.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims[1:]) < 2:
        raise ValueError("teacher needs L >= 1 and at least two units in every latent layer")
    act = nm.Activation(activation)
    rng = nm.make_rng(seed)
    # fixed point of x = k * f(x): tanh saturates to exactly 1.0 at 20
    drive = 20.0 if act is nm.Activation.TANH else 1.0
    L = len(dims) - 1
    weights = []
    for l in range(L):
        w = nm.init_weights(dims[l], dims[l + 1], rng, "xavier_uniform")
        weights.append(w)
    for l in range(1, L):
        weights[l][-1, :] = 0.0
        weights[l][-1, -1] = drive / float(act.apply(np.array([drive]))[0])
    top = rng.standard_normal((dims[L], n))
    top[-1, :] = drive
    latents = [None] * (L + 1)
    latents[L] = top
    for l in range(L - 1, 0, -1):
        latents[l] = nm.matmul(weights[l], act.apply(latents[l + 1]))
    # bound each output row by 0.5 given the largest presynaptic activity
    f_drive = float(act.apply(np.array([drive]))[0])
    reach = float(np.max(np.abs(act.apply(latents[1][:-1])), initial=0.0))
    w0 = weights[0]
    w0[:, -1] = 0.0
    row = np.abs(w0).sum(axis=1, keepdims=True) * max(reach, 1e-12)
    w0 *= 0.5 / np.where(row > 0, row, 1.0) * 0.999
    w0[:, -1] = 0.5 / f_drive
    teacher = PCNetwork(tuple(dims), tuple(weights), act)
    latents[0] = nm.matmul(teacher.weights[0], act.apply(latents[1]))
    data = np.clip(latents[0], 0.0, 1.0)
    ds = Dataset(data, None, f"teacher{dims}-seed{seed}",
                 f"md5:{hashlib.md5(data.tobytes()).hexdigest()}")
    if return_teacher:
        return ds, teacher, latents
    return ds


# -- corruptions -----------------------------------------------------------------

class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    ROTATION = "rotation"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"


@lru_cache(maxsize=None)
def corruption_table(version: int = 1) -> dict:
    text = resources.files("predcode").joinpath(f"corruptions_v{version}.yaml").read_text()
    table = yaml.safe_load(text)
    return {k.value: tuple(float(v) for v in table[k.value]) for k in CorruptionKind}


@dataclasses.dataclass(frozen=True)
class Corruption:
    """``kind`` at intensity ``level`` (0-5); ``param`` overrides the table value."""

    kind: CorruptionKind
    level: int = 1
    seed: int = 0
    param: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not 0 <= self.level <= 5:
            raise ValueError(f"corruption level must be 0..5, got {self.level}")

    @property
    def strength(self) -> float:
        if self.param is not None:
            return float(self.param)
        if self.level == 0:
            return 0.0
        return corruption_table()[self.kind.value][self.level - 1]


def _blur_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def corrupt(dataset: Dataset, corruption: Corruption) -> Dataset:
    """Apply a corruption to every image and clip back to [0, 1]."""
    if dataset.image_shape is None:
        raise UsageError(f"dataset {dataset.name!r} is not image-shaped")
    if corruption.level == 0 and corruption.param is None:
        return dataset
    h, w = dataset.image_shape
    imgs = dataset.inputs.T.reshape(-1, h, w)
    s = corruption.strength
    kind = corruption.kind
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        out = imgs + s * nm.make_rng(corruption.seed).standard_normal(imgs.shape)
    elif kind is CorruptionKind.GAUSSIAN_BLUR:
        k = _blur_kernel(s)
        out = ndimage.convolve1d(imgs, k, axis=1, mode="nearest")
        out = ndimage.convolve1d(out, k, axis=2, mode="nearest")
    elif kind is CorruptionKind.ROTATION:
        out = ndimage.rotate(imgs, s, axes=(2, 1), reshape=False, order=0, mode="constant", cval=0.0)
    elif kind is CorruptionKind.BRIGHTNESS:
        out = imgs + s
    else:
        out = 0.5 + s * (imgs - 0.5)
    out = np.clip(out, 0.0, 1.0)
    inputs = np.ascontiguousarray(out.reshape(-1, h * w).T)
    tag = f"{kind.value}@{corruption.level}" if corruption.param is None else f"{kind.value}={s}"
    return Dataset(inputs, dataset.labels, f"{dataset.name}+{tag}", dataset.checksum, dataset.image_shape)
