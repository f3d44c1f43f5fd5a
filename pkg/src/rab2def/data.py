"""Dataset loading, synthetic data and federated partitioning."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientDataError
from .model import Batch

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

ROLES = ("regular", "poor", "adversarial")
ATTACKS = ("label_flip", "random_weights", "backdoor")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    image_shape: tuple[int, int, int]

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        shape = tuple(int(s) for s in self.image_shape)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} do not line up")
        if len(shape) != 3 or math.prod(shape) != X.shape[1]:
            raise ValueError(f"image shape {shape} does not match {X.shape[1]} features")
        if self.classes < 1 or (y.size and (y.min() < 0 or y.max() >= self.classes)):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "image_shape", shape)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes, self.image_shape)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.classes, self.image_shape)

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class ClientProfile:
    id: int
    role: str = "regular"
    attack: str | None = None
    dominant_classes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if (self.attack is not None) != (self.role == "adversarial"):
            raise ValueError("an attack is set exactly when the role is adversarial")
        if self.attack is not None and self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")


@dataclass(frozen=True)
class FederatedDataset:
    clients: list[tuple[Dataset, ClientProfile]]
    server_validation: Dataset
    server_test: Dataset


def _u32(buf: bytes, offset: int, what: str) -> int:
    if len(buf) < offset + 4:
        raise FormatError(f"truncated {what} header")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(image_bytes: bytes, label_bytes: bytes, classes: int | None = None) -> Dataset:
    """Parse an IDX image/label pair (the MNIST file format)."""
    magic = _u32(image_bytes, 0, "image")
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    count, rows, cols = (_u32(image_bytes, off, "image") for off in (4, 8, 12))
    lmagic = _u32(label_bytes, 0, "label")
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"label magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    lcount = _u32(label_bytes, 4, "label")
    if lcount != count:
        raise FormatError(f"{count} images but {lcount} labels")

    n_pix = count * rows * cols
    if len(image_bytes) - 16 < n_pix:
        raise FormatError(f"image stream truncated: need {n_pix} pixel bytes, have {len(image_bytes) - 16}")
    if len(label_bytes) - 8 < count:
        raise FormatError(f"label stream truncated: need {count} bytes, have {len(label_bytes) - 8}")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=n_pix, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if count else 1
    if count and labels.max() >= classes:
        raise FormatError(f"label {labels.max()} outside [0, {classes})")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels, classes, (rows, cols, 1))


def load_cifar_bin(batch_bytes: bytes) -> Dataset:
    """Parse CIFAR-10 binary records (label byte + R, G, B planes of 32x32)."""
    if len(batch_bytes) % CIFAR_RECORD != 0:
        raise FormatError(f"stream length {len(batch_bytes)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(batch_bytes, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise FormatError(f"label {labels.max()} outside [0, 10)")
    # planes (c, h, w) -> interleaved (h, w, c)
    planes = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    features = planes.reshape(-1, CIFAR_RECORD - 1).astype(np.float64) / 255.0
    return Dataset(features, labels, 10, (32, 32, 3))


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx_files(image_path, label_path, classes: int | None = None) -> Dataset:
    return load_idx(_read(image_path), _read(label_path), classes)


def read_cifar_files(paths) -> Dataset:
    return concat([load_cifar_bin(_read(p)) for p in paths])


def concat(parts: list[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.classes for p in parts),
        first.image_shape,
    )


def square_shape(dims: int) -> tuple[int, int, int]:
    """Most square ``(h, w, 1)`` with ``h * w == dims`` and ``h <= w``."""
    h = int(math.isqrt(dims))
    while dims % h:
        h -= 1
    return (h, dims // h, 1)


def synth_blobs(
    classes: int,
    dims: int,
    per_class: int,
    spread: float,
    seed: int,
    image_shape: tuple[int, int, int] | None = None,
) -> Dataset:
    """Balanced Gaussian clusters, clipped to [0, 1].

    Class centres are drawn uniformly in [0.2, 0.8] from ``seed``; samples are
    grouped by class in label order.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dims < 1 or per_class < 0:
        raise ValueError("dims must be positive and per_class non-negative")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dims))
    noise = rng.standard_normal((classes, per_class, dims)) * spread
    X = np.clip(centers[:, None, :] + noise, 0.0, 1.0).reshape(classes * per_class, dims)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(X, y, classes, image_shape or square_shape(dims))


def _shard_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def partition(
    data: Dataset,
    n_clients: int,
    n_poor: int,
    skew: float,
    seed: int,
) -> list[tuple[Dataset, ClientProfile]]:
    """Split ``data`` into disjoint client shards.

    Poor clients get a shard of the common size in which at least ``skew`` of
    the samples come from two designated classes; the remaining samples are
    shuffled and dealt to regular clients.  Every sample lands in exactly one
    shard.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 0 <= n_poor <= n_clients:
        raise ValueError("n_poor must lie in [0, n_clients]")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    n = len(data)
    if n < n_clients:
        raise InsufficientDataError(f"{n} samples cannot cover {n_clients} clients")
    if n_poor and data.classes < 2:
        raise ValueError("poor clients need at least two classes")

    rng = np.random.default_rng(seed)
    sizes = _shard_sizes(n, n_clients)
    poor_ids = set(rng.choice(n_clients, size=n_poor, replace=False).tolist()) if n_poor else set()

    pool = {c: list(rng.permutation(np.flatnonzero(data.labels == c))) for c in range(data.classes)}
    shards: dict[int, np.ndarray] = {}
    dominant: dict[int, tuple[int, int]] = {}
    for cid in sorted(poor_ids):
        size = sizes[cid]
        pair = tuple(sorted(rng.choice(data.classes, size=2, replace=False).tolist()))
        n_dom = math.ceil(skew * size)
        halves = (n_dom - n_dom // 2, n_dom // 2)
        taken = []
        for c, want in zip(pair, halves):
            if len(pool[c]) < want:
                raise InsufficientDataError(f"class {c} has too few samples for poor client {cid}")
            taken += pool[c][:want]
            del pool[c][:want]
        others = [i for c in range(data.classes) if c not in pair for i in pool[c]]
        n_rest = size - n_dom
        if len(others) < n_rest:
            raise InsufficientDataError(f"not enough off-class samples for poor client {cid}")
        pick = set(rng.choice(len(others), size=n_rest, replace=False).tolist()) if n_rest else set()
        chosen = [others[i] for i in sorted(pick)]
        chosen_set = set(chosen)
        for c in range(data.classes):
            if c not in pair:
                pool[c] = [i for i in pool[c] if i not in chosen_set]
        shards[cid] = np.array(taken + chosen, dtype=np.int64)
        dominant[cid] = pair

    remaining = np.array(sorted(i for c in pool for i in pool[c]), dtype=np.int64)
    remaining = rng.permutation(remaining)
    pos = 0
    for cid in range(n_clients):
        if cid in poor_ids:
            continue
        shards[cid] = remaining[pos:pos + sizes[cid]]
        pos += sizes[cid]
    if pos != remaining.size:
        raise InsufficientDataError("partition could not place every sample")

    out = []
    for cid in range(n_clients):
        if cid in poor_ids:
            profile = ClientProfile(cid, "poor", dominant_classes=dominant[cid])
        else:
            profile = ClientProfile(cid)
        out.append((data.subset(np.sort(shards[cid])), profile))
    return out


def validation_split(test: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split of a test set into (server validation, remaining test).

    Per-class quotas use largest-remainder rounding so the validation size is
    exactly ``round(fraction * n)``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(test)
    target = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(test.labels == c) for c in range(test.classes)]
    exact = [fraction * len(ix) for ix in by_class]
    quota = [int(math.floor(e)) for e in exact]
    short = target - sum(quota)
    order = sorted(range(test.classes), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order:
        if short <= 0:
            break
        if quota[c] < len(by_class[c]):
            quota[c] += 1
            short -= 1

    val_idx, test_idx = [], []
    for c, ix in enumerate(by_class):
        perm = rng.permutation(ix)
        val_idx.append(perm[:quota[c]])
        test_idx.append(perm[quota[c]:])
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.array([], dtype=np.int64)
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
    return test.subset(val_idx), test.subset(test_idx)
