"""Synthetic federated classification data.

Each class is a unit-variance Gaussian blob around a mean vector; class means
are mutually orthogonal with norm ``separation`` when ``n_classes <= dim`` (random
unit directions scaled the same way otherwise). Clients get either IID label
draws or a pathological label skew where each client only sees a couple of
classes.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch

IID = "iid"
NON_IID = "noniid"
TEST_FRACTION = 0.2
MIN_NONIID_TV = 0.5
# class means this far apart leave a 32-dim, 10-class task comfortably above 90% Bayes accuracy
DEFAULT_SEPARATION = 4.0

_MAGIC = b"FAFD"
_VERSION = 1
_MODE_CODES = {IID: 0, NON_IID: 1}
# magic, version, mode, n_clients, n_classes, dim, seed, separation, classes_per_client
_HEADER = struct.Struct("<4sIIIIIQdI")
_CLIENT_HEADER = struct.Struct("<II")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class ClientData:
    train: Batch
    test: Batch


@dataclass(frozen=True)
class FederatedDataset:
    clients: list[ClientData]
    num_classes: int
    dim: int
    mode: str
    seed: int
    separation: float = DEFAULT_SEPARATION
    classes_per_client: int = 2

    def __len__(self) -> int:
        return len(self.clients)

    def pooled_test(self) -> Batch:
        return Batch(
            np.concatenate([c.test.inputs for c in self.clients]),
            np.concatenate([c.test.labels for c in self.clients]),
        )

    def pooled_train(self) -> Batch:
        return Batch(
            np.concatenate([c.train.inputs for c in self.clients]),
            np.concatenate([c.train.labels for c in self.clients]),
        )

    def label_distributions(self) -> np.ndarray:
        dist = np.zeros((len(self.clients), self.num_classes))
        for i, c in enumerate(self.clients):
            labels = np.concatenate([c.train.labels, c.test.labels])
            dist[i] = np.bincount(labels, minlength=self.num_classes) / max(len(labels), 1)
        return dist

    def reshaped(self, shape: tuple[int, ...]) -> "FederatedDataset":
        """Same data with each example reshaped (e.g. to a 1xHxW image)."""

        def re(b: Batch) -> Batch:
            return Batch(b.inputs.reshape((len(b), *shape)), b.labels)

        return FederatedDataset(
            [ClientData(re(c.train), re(c.test)) for c in self.clients],
            self.num_classes,
            self.dim,
            self.mode,
            self.seed,
            self.separation,
            self.classes_per_client,
        )


def mean_pairwise_tv(dist: np.ndarray) -> float:
    """Average total-variation distance between rows of ``dist``."""
    n = dist.shape[0]
    if n < 2:
        return 0.0
    total = sum(
        0.5 * np.abs(dist[i] - dist[j]).sum() for i, j in itertools.combinations(range(n), 2)
    )
    return float(total / (n * (n - 1) / 2))


def class_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if n_classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, n_classes)))
        dirs = q.T
    else:
        dirs = rng.normal(size=(n_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def _split(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> ClientData:
    n = len(y)
    order = rng.permutation(n)
    n_test = round_half_up(TEST_FRACTION * n)
    test, train = order[:n_test], order[n_test:]
    return ClientData(Batch(x[train], y[train]), Batch(x[test], y[test]))


def synthesize(
    n_clients: int,
    n_per_client: int,
    n_classes: int,
    dim: int,
    mode: str,
    rng: np.random.Generator,
    *,
    separation: float = DEFAULT_SEPARATION,
    classes_per_client: int = 2,
    seed: int = 0,
) -> FederatedDataset:
    """Generate a federated dataset with an 80/20 train/test split per client.

    ``mode`` is ``"iid"`` (labels drawn uniformly over all classes) or
    ``"noniid"`` (each client draws from ``classes_per_client`` classes).
    ``seed`` is only recorded in the metadata; all randomness comes from ``rng``.
    """
    if min(n_clients, n_per_client, n_classes, dim) <= 0:
        raise ValueError("n_clients, n_per_client, n_classes and dim must be positive")
    if mode not in (IID, NON_IID):
        raise ValueError(f"mode must be {IID!r} or {NON_IID!r}, got {mode!r}")
    if mode == NON_IID:
        if n_classes < 2:
            raise ValueError("non-IID partitioning needs at least 2 classes")
        if not 1 <= classes_per_client <= n_classes:
            raise ValueError("classes_per_client must lie in [1, n_classes]")

    means = class_means(n_classes, dim, separation, rng)
    clients = []
    for c in range(n_clients):
        if mode == IID:
            y = rng.integers(0, n_classes, size=n_per_client)
        else:
            # rotate the first class so every class is some client's primary one
            first = c % n_classes
            others = rng.permutation(np.delete(np.arange(n_classes), first))
            allowed = np.concatenate([[first], others[: classes_per_client - 1]])
            y = allowed[rng.integers(0, classes_per_client, size=n_per_client)]
        x = means[y] + rng.normal(size=(n_per_client, dim))
        clients.append(_split(x, y, rng))

    ds = FederatedDataset(clients, n_classes, dim, mode, seed, separation, classes_per_client)
    if mode == NON_IID and n_clients > 1 and classes_per_client <= n_classes // 2:
        tv = mean_pairwise_tv(ds.label_distributions())
        if tv < MIN_NONIID_TV:
            raise RuntimeError(f"non-IID skew too weak: mean pairwise TV {tv:.3f}")
    return ds


def save(ds: FederatedDataset, path: str | Path) -> None:
    """Write ``ds`` to the binary dataset format (see README)."""
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                _MODE_CODES[ds.mode],
                len(ds.clients),
                ds.num_classes,
                ds.dim,
                ds.seed,
                ds.separation,
                ds.classes_per_client,
            )
        )
        for c in ds.clients:
            f.write(_CLIENT_HEADER.pack(len(c.train), len(c.test)))
            for part in (c.train, c.test):
                f.write(part.inputs.reshape(len(part), -1).astype("<f8").tobytes())
                f.write(part.labels.astype("<i4").tobytes())


def load(path: str | Path) -> FederatedDataset:
    buf = Path(path).read_bytes()
    magic, version, mode, n_clients, n_classes, dim, seed, sep, cpc = _HEADER.unpack_from(buf)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a fedafd dataset file (version {_VERSION})")
    off = _HEADER.size
    clients = []

    def read_part(off, n):
        x = np.frombuffer(buf, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
        off += 8 * n * dim
        y = np.frombuffer(buf, dtype="<i4", count=n, offset=off)
        off += 4 * n
        return Batch(x.astype(np.float64), y.astype(np.int64)), off

    for _ in range(n_clients):
        n_train, n_test = _CLIENT_HEADER.unpack_from(buf, off)
        off += _CLIENT_HEADER.size
        train, off = read_part(off, n_train)
        test, off = read_part(off, n_test)
        clients.append(ClientData(train, test))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    mode_name = {v: k for k, v in _MODE_CODES.items()}[mode]
    return FederatedDataset(clients, n_classes, dim, mode_name, seed, sep, cpc)
