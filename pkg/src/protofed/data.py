"""Federated dataset construction.

Covers the synthetic logistic-regression generator, power-law sample
counts, label-shard and Dirichlet partitioning of a labeled pool, 80/20
per-client splits, IDX-format ingestion for MNIST-style images, and exact
JSONL (de)serialization of built datasets.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rand

SYNTH_INPUT_DIM = 60
SYNTH_NUM_CLASSES = 10

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised on malformed IDX files; message carries the byte offset."""


@dataclass
class ClientDataset:
    """One client's local data with its 80/20 train/test split."""

    client_id: int
    train_x: np.ndarray  # (n_train, input_dim) float64
    train_y: np.ndarray  # (n_train,) int64
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_test(self) -> int:
        return len(self.test_y)


@dataclass
class FederatedDataset:
    clients: list[ClientDataset]
    num_classes: int
    input_dim: int
    total_samples: int

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def train_sizes(self) -> dict[int, int]:
        return {c.client_id: c.n_train for c in self.clients}

    def pooled_train(self) -> tuple[np.ndarray, np.ndarray]:
        """All training splits concatenated in client-id order."""
        xs = np.concatenate([c.train_x for c in self.clients])
        ys = np.concatenate([c.train_y for c in self.clients])
        return xs, ys

    def pooled_test(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.concatenate([c.test_x for c in self.clients])
        ys = np.concatenate([c.test_y for c in self.clients])
        return xs, ys


@dataclass
class PartitionSpec:
    """How to build a FederatedDataset. Scheme-specific fields must be
    present exactly when the scheme requires them."""

    scheme: str  # synthetic | label_shard | dirichlet
    num_clients: int
    total_samples: int
    power_law_gamma: float = 2.0
    min_per_client: int = 2
    seed: int = 0
    phi1: float | None = None            # synthetic only
    phi2: float | None = None            # synthetic only
    shards_per_client: int | None = None  # label_shard only
    alpha: float | None = None            # dirichlet only

    def __post_init__(self):
        if self.scheme not in ("synthetic", "label_shard", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        required = {
            "synthetic": ("phi1", "phi2"),
            "label_shard": ("shards_per_client",),
            "dirichlet": ("alpha",),
        }[self.scheme]
        for name in ("phi1", "phi2", "shards_per_client", "alpha"):
            value = getattr(self, name)
            if name in required and value is None:
                raise ValueError(f"scheme {self.scheme!r} requires field {name!r}")
            if name not in required and value is not None:
                raise ValueError(f"field {name!r} is not valid for scheme {self.scheme!r}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.shards_per_client is not None and self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")
        if self.min_per_client < 2:
            raise ValueError("min_per_client must be >= 2 (the 80/20 split needs a test sample)")


def split_80_20(x: np.ndarray, y: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle, then split at ceil(0.8 n), capped so the test side
    is never empty. Returns (train_x, train_y, test_x, test_y)."""
    n = len(y)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    order = rand.rng(seed, rand.DATA_SPLIT).permutation(n)
    n_train = min(int(np.ceil(0.8 * n)), n - 1)
    tr, te = order[:n_train], order[n_train:]
    return x[tr], y[tr], x[te], y[te]


def power_law_counts(num_clients: int, total: int, gamma: float, min_per_client: int = 2, seed: int = 0) -> list[int]:
    """Sample counts summing exactly to `total`, each >= min_per_client.

    Rank weights (r+1)^-gamma are assigned to clients through a seeded
    random permutation; after the minimum allotment the remainder is
    apportioned by largest remainder.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if total < num_clients * min_per_client:
        raise ValueError(
            f"total {total} cannot cover {num_clients} clients at min {min_per_client}"
        )
    perm = rand.rng(seed, rand.DATA_COUNTS).permutation(num_clients)
    weights = (np.arange(num_clients, dtype=np.float64) + 1.0) ** (-gamma)
    weights /= weights.sum()
    remaining = total - num_clients * min_per_client
    quotas = remaining * weights
    base = np.floor(quotas).astype(np.int64)
    leftover = remaining - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:leftover]] += 1
    counts = np.full(num_clients, min_per_client, dtype=np.int64)
    counts[perm] += base
    return [int(c) for c in counts]


def gen_synthetic(num_clients: int, phi1: float, phi2: float, samples_per_client: list[int], seed: int) -> FederatedDataset:
    """Client-heterogeneous logistic-regression data.

    Per client k: a scalar u_k ~ N(0, phi1) seeds the labeling model
    (W_k, b_k entries ~ N(u_k, 1)); a scalar B_k ~ N(0, phi2) seeds the
    input distribution (v_k entries ~ N(B_k, 1)); inputs are drawn
    x ~ N(v_k, Sigma) with diagonal Sigma_jj = j^-1.2 (1-indexed) and
    labeled by argmax(W_k x + b_k). The second parameter of N(., .) is the
    variance. x is 60-dimensional, labels cover 10 classes.
    """
    if phi1 < 0 or phi2 < 0:
        raise ValueError("phi1 and phi2 must be non-negative")
    if len(samples_per_client) != num_clients:
        raise ValueError("samples_per_client must list one count per client")
    if any(c <= 0 for c in samples_per_client):
        raise ValueError("per-client sample counts must be positive")
    cov_std = (np.arange(1, SYNTH_INPUT_DIM + 1, dtype=np.float64)) ** (-0.6)  # sqrt(j^-1.2)
    clients = []
    for k in range(num_clients):
        gen = rand.rng(seed, rand.DATA_SYNTH, k)
        u_k = gen.normal(0.0, np.sqrt(phi1))
        w = gen.normal(u_k, 1.0, size=(SYNTH_NUM_CLASSES, SYNTH_INPUT_DIM))
        b = gen.normal(u_k, 1.0, size=SYNTH_NUM_CLASSES)
        b_k = gen.normal(0.0, np.sqrt(phi2))
        v_k = gen.normal(b_k, 1.0, size=SYNTH_INPUT_DIM)
        n = samples_per_client[k]
        x = v_k + gen.normal(0.0, 1.0, size=(n, SYNTH_INPUT_DIM)) * cov_std
        y = np.argmax(x @ w.T + b, axis=1).astype(np.int64)
        clients.append(_make_client(k, x, y, seed))
    total = sum(samples_per_client)
    return FederatedDataset(clients, SYNTH_NUM_CLASSES, SYNTH_INPUT_DIM, total)


def _make_client(client_id: int, x: np.ndarray, y: np.ndarray, seed: int) -> ClientDataset:
    tx, ty, vx, vy = split_80_20(x, y, rand.derive_seed(seed, rand.DATA_SPLIT, client_id))
    return ClientDataset(client_id, tx, ty, vx, vy)


class _ClassPool:
    """Per-class sample queues over a labeled pool.

    Draws without replacement from a seeded shuffle of each class; once a
    class is exhausted it falls back to drawing with replacement (warning
    emitted once per class) so client quotas stay exact.
    """

    def __init__(self, pool_y: np.ndarray, gen: np.random.Generator):
        self.gen = gen
        self.classes = np.unique(pool_y)
        self.queues = {}
        self.cursor = {}
        self.warned = set()
        for c in self.classes:
            idx = np.flatnonzero(pool_y == c)
            self.queues[int(c)] = idx[gen.permutation(len(idx))]
            self.cursor[int(c)] = 0

    def draw(self, c: int, count: int) -> np.ndarray:
        queue = self.queues[c]
        start = self.cursor[c]
        take = queue[start : start + count]
        self.cursor[c] = start + len(take)
        short = count - len(take)
        if short > 0:
            if c not in self.warned:
                warnings.warn(f"class {c} pool exhausted; sampling with replacement")
                self.warned.add(c)
            extra = self.gen.choice(queue, size=short, replace=True)
            take = np.concatenate([take, extra])
        return take


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of `total` proportional to quotas."""
    scaled = quotas * (total / quotas.sum()) if quotas.sum() > 0 else np.full_like(quotas, total / len(quotas))
    base = np.floor(scaled).astype(np.int64)
    leftover = total - int(base.sum())
    order = np.argsort(-(scaled - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def label_shard_partition(
    pool_x: np.ndarray,
    pool_y: np.ndarray,
    num_clients: int,
    shards_per_client: int,
    counts: list[int],
    seed: int,
) -> FederatedDataset:
    """Give each client samples from only `shards_per_client` seeded-assigned
    classes (a class may serve multiple clients)."""
    if len(pool_y) == 0:
        raise ValueError("empty sample pool")
    if shards_per_client < 1:
        raise ValueError("shards_per_client must be >= 1")
    if len(counts) != num_clients:
        raise ValueError("counts must list one quota per client")
    gen = rand.rng(seed, rand.DATA_SHARD)
    pool = _ClassPool(pool_y, gen)
    if shards_per_client > len(pool.classes):
        raise ValueError(
            f"shards_per_client {shards_per_client} exceeds {len(pool.classes)} distinct labels"
        )
    clients = []
    for k in range(num_clients):
        cls = gen.choice(pool.classes, size=shards_per_client, replace=False)
        quota = counts[k]
        per_class = np.full(shards_per_client, quota // shards_per_client, dtype=np.int64)
        per_class[: quota % shards_per_client] += 1
        idx = np.concatenate([pool.draw(int(c), int(q)) for c, q in zip(cls, per_class) if q > 0])
        clients.append(_make_client(k, pool_x[idx], pool_y[idx].astype(np.int64), seed))
    return FederatedDataset(clients, int(pool_y.max()) + 1, pool_x.shape[1], int(sum(counts)))


def dirichlet_proportions(alpha: float, num_classes: int, gen: np.random.Generator) -> np.ndarray:
    """One client's class-proportion vector ~ Dirichlet(alpha * 1)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return gen.dirichlet(np.full(num_classes, alpha, dtype=np.float64))


def dirichlet_partition(
    pool_x: np.ndarray,
    pool_y: np.ndarray,
    num_clients: int,
    alpha: float,
    counts: list[int],
    seed: int,
) -> FederatedDataset:
    """Per-client class proportions ~ Dirichlet(alpha), quotas filled
    class-by-class from the pool (replacement fallback on exhaustion)."""
    if len(pool_y) == 0:
        raise ValueError("empty sample pool")
    if len(counts) != num_clients:
        raise ValueError("counts must list one quota per client")
    gen = rand.rng(seed, rand.DATA_DIRICHLET)
    pool = _ClassPool(pool_y, gen)
    n_classes = len(pool.classes)
    clients = []
    for k in range(num_clients):
        q = dirichlet_proportions(alpha, n_classes, gen)
        per_class = _largest_remainder(q, counts[k])
        parts = [pool.draw(int(c), int(m)) for c, m in zip(pool.classes, per_class) if m > 0]
        idx = np.concatenate(parts)
        clients.append(_make_client(k, pool_x[idx], pool_y[idx].astype(np.int64), seed))
    return FederatedDataset(clients, int(pool_y.max()) + 1, pool_x.shape[1], int(sum(counts)))


def _read_header(data: bytes, n_fields: int, path) -> tuple[list[int], int]:
    need = 4 * n_fields
    if len(data) < need:
        raise IdxFormatError(f"{path}: truncated header at byte {len(data)} (need {need})")
    values = list(struct.unpack(f">{n_fields}I", data[:need]))
    return values, need


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair.

    Returns (x, y): pixels scaled to [0, 1] as flat float64 vectors of
    length rows*cols, labels as int64. Malformed files raise
    IdxFormatError with the offending byte offset.
    """
    img_bytes = Path(images_path).read_bytes()
    (magic, n_img, rows, cols), off = _read_header(img_bytes, 4, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic {magic:#010x} at byte 0 (expected {IDX_IMAGES_MAGIC:#010x})")
    expected = off + n_img * rows * cols
    if len(img_bytes) != expected:
        raise IdxFormatError(f"{images_path}: expected {expected} bytes, file ends at byte {len(img_bytes)}")

    lab_bytes = Path(labels_path).read_bytes()
    (magic_l, n_lab), off_l = _read_header(lab_bytes, 2, labels_path)
    if magic_l != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic {magic_l:#010x} at byte 0 (expected {IDX_LABELS_MAGIC:#010x})")
    if len(lab_bytes) != off_l + n_lab:
        raise IdxFormatError(f"{labels_path}: expected {off_l + n_lab} bytes, file ends at byte {len(lab_bytes)}")
    if n_img != n_lab:
        raise IdxFormatError(
            f"{images_path}: {n_img} images but {labels_path} holds {n_lab} labels (byte {off})"
        )
    x = np.frombuffer(img_bytes, dtype=np.uint8, offset=off).astype(np.float64) / 255.0
    x = x.reshape(n_img, rows * cols)
    y = np.frombuffer(lab_bytes, dtype=np.uint8, offset=off_l).astype(np.int64)
    return x, y


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a (n, rows, cols) uint8 image stack and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (n, rows, cols), got {images.shape}")
    if len(images) != len(labels):
        raise ValueError("image/label counts differ")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


def gen_blob_pool(num_classes: int, total: int, side: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image-classification stand-in pool.

    Each class is a fixed random grayscale pattern; samples are the pattern
    plus Gaussian pixel noise, clipped to [0, 1] and quantized to uint8.
    Returns (images (n, side, side) uint8, labels (n,) uint8), shuffled.
    """
    gen = rand.rng(seed, rand.DATA_POOL)
    dim = side * side
    centers = gen.uniform(0.0, 1.0, size=(num_classes, dim))
    per_class = _largest_remainder(np.ones(num_classes), total)
    xs, ys = [], []
    for c in range(num_classes):
        m = int(per_class[c])
        samples = np.clip(centers[c] + gen.normal(0.0, noise, size=(m, dim)), 0.0, 1.0)
        xs.append(samples)
        ys.append(np.full(m, c, dtype=np.uint8))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = gen.permutation(len(y))
    images = np.rint(x[order] * 255.0).astype(np.uint8).reshape(-1, side, side)
    return images, y[order]


def build_dataset(spec: PartitionSpec, pool: tuple[np.ndarray, np.ndarray] | None = None) -> FederatedDataset:
    """Construct a FederatedDataset from a PartitionSpec.

    label_shard and dirichlet schemes need a labeled `pool` (x, y); the
    synthetic scheme generates its own inputs.
    """
    counts = power_law_counts(
        spec.num_clients, spec.total_samples, spec.power_law_gamma, spec.min_per_client, spec.seed
    )
    if spec.scheme == "synthetic":
        return gen_synthetic(spec.num_clients, spec.phi1, spec.phi2, counts, spec.seed)
    if pool is None:
        raise ValueError(f"scheme {spec.scheme!r} requires a labeled sample pool")
    pool_x, pool_y = pool
    if spec.scheme == "label_shard":
        return label_shard_partition(pool_x, pool_y, spec.num_clients, spec.shards_per_client, counts, spec.seed)
    return dirichlet_partition(pool_x, pool_y, spec.num_clients, spec.alpha, counts, spec.seed)


def save_dataset(dataset: FederatedDataset, directory) -> None:
    """Serialize to a directory of per-client JSONL files (one sample per
    line); floats round-trip exactly via shortest-repr decimal encoding."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_classes": dataset.num_classes,
        "input_dim": dataset.input_dim,
        "total_samples": dataset.total_samples,
        "num_clients": dataset.num_clients,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for client in dataset.clients:
        lines = []
        for split, xs, ys in (("train", client.train_x, client.train_y), ("test", client.test_x, client.test_y)):
            for row, label in zip(xs, ys):
                lines.append(json.dumps({"split": split, "label": int(label), "x": row.tolist()}))
        path = directory / f"client_{client.client_id:05d}.jsonl"
        path.write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> FederatedDataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    clients = []
    for k in range(meta["num_clients"]):
        path = directory / f"client_{k:05d}.jsonl"
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if rec["split"] == "train":
                tr_x.append(rec["x"])
                tr_y.append(rec["label"])
            else:
                te_x.append(rec["x"])
                te_y.append(rec["label"])
        clients.append(
            ClientDataset(
                k,
                np.array(tr_x, dtype=np.float64),
                np.array(tr_y, dtype=np.int64),
                np.array(te_x, dtype=np.float64),
                np.array(te_y, dtype=np.int64),
            )
        )
    return FederatedDataset(clients, meta["num_classes"], meta["input_dim"], meta["total_samples"])
