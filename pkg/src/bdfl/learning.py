"""Desk-scale learning engine.

Models are plain float64 weight vectors interpreted through a :class:`ModelSpec`.
Layer parameters are packed layer by layer as ``W`` (row-major, in x out)
followed by ``b``, so a vector can be hashed, noised and averaged without
knowing the architecture.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801


class ShapeMismatchError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


class IdxFormatError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()

    @classmethod
    def logistic(cls, input_dim, num_classes):
        return cls(input_dim, num_classes, ())

    @classmethod
    def mlp(cls, input_dim=784, num_classes=10, hidden=(32,)):
        return cls(input_dim, num_classes, tuple(hidden))

    @property
    def architecture(self) -> str:
        return "mlp" if self.hidden else "logistic-regression"

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def weight_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def unpack(self, weights: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of ``(W, b)`` per layer; no copies are made."""
        weights = np.asarray(weights)
        if weights.ndim != 1 or weights.shape[0] != self.weight_count:
            raise ShapeMismatchError(
                f"expected {self.weight_count} weights for {self}, got shape {weights.shape}"
            )
        layers = []
        pos = 0
        for i, o in self.layer_shapes:
            W = weights[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = weights[pos:pos + o]
            pos += o
            layers.append((W, b))
        return layers


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, provenance=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       provenance or self.provenance)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    @staticmethod
    def concat(parts: list["Dataset"], provenance=None) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       parts[0].num_classes, provenance or parts[0].provenance)


# -- model maths -------------------------------------------------------------

def init_weights(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for i, o in spec.layer_shapes:
        limit = np.sqrt(6.0 / (i + o))
        chunks.append(rng.uniform(-limit, limit, size=i * o))
        chunks.append(np.zeros(o))
    return np.concatenate(chunks)


def logits(spec: ModelSpec, weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeMismatchError(f"inputs of shape {X.shape} do not match input_dim={spec.input_dim}")
    layers = spec.unpack(weights)
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
    W, b = layers[-1]
    return h @ W + b


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(spec: ModelSpec, weights, X, y) -> float:
    lp = _log_softmax(logits(spec, weights, X))
    return float(-lp[np.arange(len(y)), y].mean())


def loss_and_grad(spec: ModelSpec, weights, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the flat weights."""
    layers = spec.unpack(weights)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = len(y)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    lp = _log_softmax(h @ W + b)
    value = float(-lp[np.arange(n), y].mean())

    delta = np.exp(lp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a = acts[k]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if k:
            delta = (delta @ W.T) * (1.0 - a * a)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return value, np.concatenate(flat)


def train_epochs(spec: ModelSpec, weights, data: Dataset, lr: float, epochs: int,
                 rng: np.random.Generator, batch_size: int = 10) -> np.ndarray:
    """Mini-batch SGD on cross-entropy; batch order comes from ``rng``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    w = np.array(weights, dtype=np.float64, copy=True)
    spec.unpack(w)
    if lr == 0 or epochs <= 0:
        return w
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            value, g = loss_and_grad(spec, w, data.features[idx], data.labels[idx])
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss {value} during SGD")
            w -= lr * g
    return w


def predict(spec: ModelSpec, weights, X) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits(spec, weights, X), axis=1)


def evaluate_accuracy(spec: ModelSpec, weights, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.dim != spec.input_dim:
        raise ShapeMismatchError(f"dataset dim {data.dim} != model input_dim {spec.input_dim}")
    return int((predict(spec, weights, data.features) == data.labels).sum()) / len(data)


# -- datasets ----------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a uint8 array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(path, 0, "file too short for a magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(path, 0, f"bad magic number {magic:#010x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    if len(raw) - header_end != expected:
        raise IdxFormatError(path, header_end,
                             f"payload has {len(raw) - header_end} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_mnist(image_file, label_file, subset_size: int | None = None, seed: int = 0) -> Dataset:
    images = read_idx(image_file)
    labels = read_idx(label_file)
    if images.ndim != 3:
        raise IdxFormatError(image_file, 3, f"expected a 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IdxFormatError(label_file, 3, f"expected a 1-D label vector, got {labels.ndim}-D")
    if len(images) != len(labels):
        raise IdxFormatError(label_file, 4, f"{len(labels)} labels for {len(images)} images")
    n = len(labels)
    if subset_size is None:
        idx = np.arange(n)
    else:
        if subset_size > n:
            raise ValueError(f"subset of {subset_size} requested from a file of {n} items")
        idx = np.sort(np.random.default_rng(seed).permutation(n)[:subset_size])
    X = images[idx].reshape(len(idx), -1).astype(np.float64) / 255.0
    return Dataset(X, labels[idx].astype(np.int64), 10, "mnist-subset", {"indices": idx})


def gen_synthetic_blobs(num_classes: int, per_class: int, dim: int, spread: float,
                        seed: int, separation: float = 4.0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, rows shuffled."""
    if min(num_classes, per_class, dim) <= 0:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(num_classes, dim))
    X = np.concatenate([means[k] + spread * rng.standard_normal((per_class, dim))
                        for k in range(num_classes)])
    y = np.repeat(np.arange(num_classes), per_class)
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], num_classes, "synthetic")


def partition_dataset(data: Dataset, num_clients: int, scheme: str = "iid", seed: int = 0,
                      shards_per_client: int = 2) -> list[Dataset]:
    """Split into disjoint, exhaustive client datasets.

    ``label-skew`` cuts every class into single-label shards and deals
    ``shards_per_client`` of them to each client, so no client sees more than
    that many distinct labels.
    """
    if num_clients <= 0:
        raise ValueError("num_clients must be positive")
    if num_clients > len(data):
        raise ValueError(f"{num_clients} clients but only {len(data)} samples")
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        parts = np.array_split(rng.permutation(len(data)), num_clients)
        return [data.subset(p) for p in parts]
    if scheme != "label-skew":
        raise ValueError(f"unknown partition scheme {scheme!r}")

    total = num_clients * shards_per_client
    classes, counts = np.unique(data.labels, return_counts=True)
    if total < len(classes) or total > len(data):
        raise ValueError("shard count incompatible with class count / sample count")
    # largest-remainder allocation of shards to classes, at least one each
    quota = counts / counts.sum() * total
    alloc = np.maximum(1, np.floor(quota).astype(int))
    alloc = np.minimum(alloc, counts)
    while alloc.sum() < total:
        room = np.where(alloc < counts, quota - alloc, -np.inf)
        alloc[int(np.argmax(room))] += 1
    while alloc.sum() > total:
        room = np.where(alloc > 1, alloc - quota, -np.inf)
        alloc[int(np.argmax(room))] -= 1
    shards = []
    for cls, k in zip(classes, alloc):
        members = rng.permutation(np.flatnonzero(data.labels == cls))
        shards.extend(np.array_split(members, k))
    deal = rng.permutation(len(shards))
    return [data.subset(np.concatenate([shards[s] for s in deal[c::num_clients]]))
            for c in range(num_clients)]
