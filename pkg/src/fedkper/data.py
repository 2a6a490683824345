"""Datasets, Dirichlet label-skew partitioning, local splits and file I/O."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

MAGIC = b"FDS1"
_HEADER = struct.Struct("<4sIII")

DEFAULT_MIN_PER_CLIENT = 10
DEFAULT_LOCAL_TEST_FRAC = 0.2


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels).reshape(-1)
        if x.ndim != 2:
            raise ValidationError(f"features must be a matrix, got shape {x.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
        if x.shape[0] != y.size:
            raise ValidationError(f"{x.shape[0]} feature rows but {y.size} labels")
        if y.size < 1:
            raise ValidationError("dataset needs at least one sample")
        if self.class_count < 1:
            raise ValidationError("class_count must be positive")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ValidationError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise ValidationError("features must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", int(self.class_count))

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def equals(self, other: Dataset) -> bool:
        return (
            self.class_count == other.class_count
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    train: Dataset
    test: Dataset
    histogram: np.ndarray = field(init=False)

    def __post_init__(self):
        hist = self.train.histogram()
        hist.setflags(write=False)
        object.__setattr__(self, "histogram", hist)

    @property
    def size(self) -> int:
        return len(self.train)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def generate_synthetic(
    class_count: int, dim: int, per_class: int, spread: float, seed: int, separation: float = 4.0
) -> Dataset:
    """Balanced isotropic Gaussian blobs.

    Class means are drawn from a standard normal and rescaled so the closest
    pair sits ``max(separation * spread, 1)`` apart.
    Features are rounded to float32 so the binary format round-trips exactly.
    """
    if class_count < 2 or dim < 2 or per_class < 1:
        raise ValidationError("need class_count >= 2, dim >= 2, per_class >= 1")
    if spread < 0:
        raise ValidationError("spread must be non-negative")
    rng = _rng(seed, 0xDA7A)
    means = rng.standard_normal((class_count, dim))
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    closest = gaps[np.triu_indices(class_count, 1)].min()
    target = max(separation * spread, 1.0)
    means *= target / closest
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((labels.size, dim)) * spread
    features = (means[labels] + noise).astype(np.float32).astype(np.float64)
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], class_count)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_local(data: Dataset, test_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Label-stratified train/test split with ``round(test_frac * n)`` test rows.

    Per-class test quotas use largest remainders; a class keeps at least one
    training sample whenever it has two or more, and singleton classes only
    go to test if no other class can fill the quota.
    """
    if not 0 < test_frac < 1:
        raise ConfigError("test_frac must lie in (0, 1)", key="test_frac")
    n = len(data)
    n_test = _round_half_up(test_frac * n)
    if n_test < 1 or n_test >= n:
        raise ConfigError(
            f"split of {n} samples at test_frac={test_frac} leaves an empty side", key="test_frac"
        )
    rng = _rng(seed, 0x5911)
    counts = data.histogram()
    cap = np.where(counts >= 2, counts - 1, 0)
    quota = test_frac * counts
    take = np.minimum(np.floor(quota).astype(np.int64), cap)
    remainder = quota - take
    # largest fractional part first, lowest class index on ties
    for c in sorted(range(data.class_count), key=lambda c: (-remainder[c], c)):
        if take.sum() >= n_test:
            break
        if take[c] < cap[c]:
            take[c] += 1
    while take.sum() > n_test:
        c = int(np.argmax(take))
        take[c] -= 1
    spare = counts - take
    for c in sorted(range(data.class_count), key=lambda c: (-spare[c], c)):
        while take.sum() < n_test and take[c] < counts[c] and counts.sum() - take.sum() > 1:
            take[c] += 1
    train_idx, test_idx = [], []
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        members = members[rng.permutation(members.size)]
        test_idx.extend(members[: take[c]].tolist())
        train_idx.extend(members[take[c]:].tolist())
    train_idx.sort()
    test_idx.sort()
    if not train_idx or not test_idx:
        raise ConfigError("split left an empty train or test side", key="test_frac")
    return data.subset(train_idx), data.subset(test_idx)


def dirichlet_partition(
    data: Dataset,
    clients: int,
    alpha: float,
    min_per_client: int = DEFAULT_MIN_PER_CLIENT,
    seed: int = 0,
    test_frac: float = DEFAULT_LOCAL_TEST_FRAC,
) -> list[ClientDataset]:
    """Split ``data`` across clients with per-class Dirichlet(alpha) proportions.

    For each class a proportion vector over clients is drawn and that class's
    shuffled samples are cut accordingly. Clients left below
    ``min_per_client`` are topped up from whichever client currently holds
    the most samples, taking from its most populous class. Each client's
    share is then split into local train/test with :func:`split_local`.
    """
    assignment = dirichlet_assignment(data.labels, data.class_count, clients, alpha, min_per_client, seed)
    out = []
    for k, idx in enumerate(assignment):
        pool = data.subset(idx)
        train, test = split_local(pool, test_frac, seed=_split_seed(seed, k))
        out.append(ClientDataset(k, train, test))
    return out


def _split_seed(seed: int, client: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0x5EED, int(client)]).generate_state(1)[0])


def dirichlet_assignment(labels, class_count, clients, alpha, min_per_client, seed) -> list[np.ndarray]:
    """Sample indices per client; see :func:`dirichlet_partition`."""
    if clients < 2:
        raise ConfigError("need at least 2 clients", key="clients")
    if not alpha > 0:
        raise ConfigError("alpha must be positive", key="alpha")
    if min_per_client < 1:
        raise ConfigError("min_per_client must be >= 1", key="min_per_client")
    labels = np.asarray(labels)
    n = labels.size
    if clients * min_per_client > n:
        raise ConfigError(
            f"{clients} clients x {min_per_client} samples exceeds dataset size {n}",
            key="min_per_client",
        )
    rng = _rng(seed, 0xD1C7)
    # held[k][c] -> list of sample indices
    held = [[[] for _ in range(class_count)] for _ in range(clients)]
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        props = rng.dirichlet(np.full(clients, float(alpha)))
        cuts = np.floor(np.cumsum(props)[:-1] * members.size).astype(np.int64)
        for k, chunk in enumerate(np.split(members, cuts)):
            held[k][c].extend(chunk.tolist())

    def total(k):
        return sum(len(b) for b in held[k])

    for k in range(clients):
        while total(k) < min_per_client:
            donor = max((j for j in range(clients) if j != k), key=lambda j: (total(j), -j))
            c = max(range(class_count), key=lambda c: (len(held[donor][c]), -c))
            held[k][c].append(held[donor][c].pop())
    return [np.sort(np.array([i for bucket in held[k] for i in bucket], dtype=np.int64)) for k in range(clients)]


def save_dataset(data: Dataset, path) -> None:
    """Write the FDS1 binary format (little-endian, float32 features, u16 labels)."""
    n, d = data.features.shape
    if data.class_count > 0xFFFF:
        raise ValidationError("class_count does not fit in 16-bit labels")
    feats = data.features.astype("<f4")
    if not np.array_equal(feats.astype(np.float64), data.features):
        raise ValidationError("features are not exactly representable as float32")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, n, d, data.class_count))
    buf.write(feats.tobytes(order="C"))
    buf.write(data.labels.astype("<u2").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file is {len(raw)} bytes, shorter than the header", offset=len(raw))
    magic, n, d, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if n == 0:
        raise FormatError("dataset declares zero samples", offset=4)
    if d == 0:
        raise FormatError("dataset declares zero feature columns", offset=8)
    if c == 0:
        raise FormatError("dataset declares zero classes", offset=12)
    feat_end = _HEADER.size + 4 * n * d
    label_end = feat_end + 2 * n
    if len(raw) < label_end:
        raise FormatError(f"truncated file: need {label_end} bytes, have {len(raw)}", offset=len(raw))
    if len(raw) > label_end:
        raise FormatError("trailing bytes after label block", offset=label_end)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=feat_end)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= class count {c}", offset=feat_end + 2 * i)
    if not np.all(np.isfinite(feats)):
        i = int(np.flatnonzero(~np.isfinite(feats.reshape(-1)))[0])
        raise FormatError("non-finite feature value", offset=_HEADER.size + 4 * i)
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), int(c))


def load_csv(path, class_count: int | None = None) -> Dataset:
    """Read a CSV with a header row, feature columns, and a final ``label`` column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file", line=1) from None
        if not header or header[-1].strip() != "label":
            raise FormatError("last header column must be 'label'", line=1)
        width = len(header)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                rows.append([float(v) for v in row[:-1]])
                label = float(row[-1])
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno) from None
            if label != int(label) or label < 0:
                raise FormatError(f"label {row[-1]!r} is not a class index", line=lineno)
            labels.append(int(label))
    if not rows:
        raise FormatError("CSV has no data rows", line=2)
    c = class_count if class_count is not None else max(labels) + 1
    if max(labels) >= c:
        raise FormatError(f"label {max(labels)} >= class count {c}", line=2 + labels.index(max(labels)))
    return Dataset(np.array(rows), np.array(labels), c)


def load_any(path, class_count: int | None = None) -> Dataset:
    if str(path).lower().endswith(".csv"):
        return load_csv(path, class_count)
    return load_dataset(path)
