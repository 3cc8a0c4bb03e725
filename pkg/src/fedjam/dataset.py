"""Dataset container (FJAM files), stratified splits and client partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._seeding import rng_from
from .exceptions import ConfigurationError, FormatError, InputError

FJAM_MAGIC = b"FJAM"
FJAM_VERSION = 1
# magic, version u32, count u32, height u16, width u16, num_classes u8
_HEADER = struct.Struct("<4sIIHHB")
HEADER_SIZE = _HEADER.size


@dataclass
class SpectrogramDataset:
    """``images`` is ``(count, height, width)`` uint8, ``labels`` is ``(count,)`` uint8."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 6

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise InputError("images must be (count, height, width) with one label per image")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            bad = int(np.argmax(self.labels >= self.num_classes))
            raise InputError(f"record {bad} has label {self.labels[bad]} >= num_classes={self.num_classes}")

    @classmethod
    def from_records(cls, records, num_classes: int = 6) -> "SpectrogramDataset":
        if not records:
            raise InputError("no records")
        return cls(
            images=np.stack([r.pixels for r in records]),
            labels=np.array([int(r.label) for r in records]),
            num_classes=num_classes,
        )

    def __len__(self):
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def dump_dataset(ds: SpectrogramDataset) -> bytes:
    header = _HEADER.pack(FJAM_MAGIC, FJAM_VERSION, len(ds), ds.height, ds.width, ds.num_classes)
    body = np.concatenate([ds.labels[:, None], ds.images.reshape(len(ds), ds.height * ds.width)], axis=1)
    return header + body.tobytes()


def parse_dataset(data: bytes) -> SpectrogramDataset:
    if len(data) < 4 or data[:4] != FJAM_MAGIC:
        raise FormatError(f"bad FJAM magic {bytes(data[:4])!r}", offset=0)
    if len(data) < HEADER_SIZE:
        raise FormatError("truncated FJAM header", offset=len(data))
    _, version, count, height, width, num_classes = _HEADER.unpack_from(data)
    if version != FJAM_VERSION:
        raise FormatError(f"unsupported FJAM version {version}", offset=4)
    rec = 1 + height * width
    expected = HEADER_SIZE + count * rec
    if len(data) < expected:
        whole = (len(data) - HEADER_SIZE) // rec if rec else 0
        raise FormatError(f"truncated FJAM file: record {whole} of {count} is incomplete", offset=len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after last FJAM record", offset=expected)
    body = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(count, rec)
    labels = body[:, 0]
    if count and int(labels.max()) >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(
            f"record {bad} has label {labels[bad]} >= num_classes={num_classes}",
            offset=HEADER_SIZE + bad * rec,
        )
    return SpectrogramDataset(body[:, 1:].reshape(count, height, width).copy(), labels.copy(), num_classes)


def save_dataset(ds: SpectrogramDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_dataset(ds))


def load_dataset(path) -> SpectrogramDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# --------------------------------------------------------------------------
# splitting


def split_train_test(labels, test_fraction: float = 0.25, seed: int = 0):
    """Stratified split; returns sorted ``(train_idx, test_idx)``.

    Each class sends ``round(count * test_fraction)`` records to test, clamped
    so both sides keep at least one.
    """
    labels = np.asarray(labels)
    if not 0 < test_fraction < 1:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise InputError(f"class {c} has {len(idx)} record(s); at least 2 are needed to split")
        n_test = min(max(round(len(idx) * test_fraction), 1), len(idx) - 1)
        idx = rng_from(seed, int(c)).permutation(idx)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# --------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionMap:
    """Disjoint client shards; each ``assignments[i]`` is a sorted index list."""

    assignments: list
    seed: int = 0
    mode: str = "iid"
    beta: Optional[float] = None
    num_clients: int = field(init=False)

    def __post_init__(self):
        self.assignments = [sorted(int(i) for i in a) for a in self.assignments]
        self.num_clients = len(self.assignments)

    def sizes(self) -> list:
        return [len(a) for a in self.assignments]

    def all_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([np.asarray(a, dtype=np.int64) for a in self.assignments]))

    def validate(self, train_indices=None) -> None:
        if self.num_clients < 1:
            raise ConfigurationError("partition has no clients")
        if self.mode not in ("iid", "dirichlet"):
            raise ConfigurationError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and not (self.beta is not None and self.beta > 0):
            raise ConfigurationError("dirichlet partition needs beta > 0")
        for i, a in enumerate(self.assignments):
            if not a:
                raise ConfigurationError(f"client {i} has an empty shard")
        union = self.all_indices()
        if len(np.unique(union)) != len(union):
            raise ConfigurationError("client shards overlap")
        if train_indices is not None and not np.array_equal(union, np.sort(np.asarray(train_indices))):
            raise ConfigurationError("client shards do not cover the training set exactly")

    def histogram(self, labels, num_classes: int) -> np.ndarray:
        """``(num_clients, num_classes)`` sample counts."""
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[a], minlength=num_classes) for a in self.assignments])

    def to_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.mode == "dirichlet":
            out["beta"] = self.beta
        out.update(seed=self.seed, num_clients=self.num_clients, assignments=self.assignments)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionMap":
        try:
            pm = cls(
                assignments=data["assignments"],
                seed=int(data["seed"]),
                mode=data["mode"],
                beta=data.get("beta"),
            )
            declared = int(data["num_clients"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"malformed partition JSON: {exc!r}") from None
        if declared != pm.num_clients:
            raise FormatError(f"num_clients={data['num_clients']} but {pm.num_clients} assignment lists")
        try:
            pm.validate()
        except ConfigurationError as exc:
            raise FormatError(f"invalid partition: {exc}") from None
        return pm


def save_partition(pm: PartitionMap, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(pm.to_dict(), fh)
        fh.write("\n")


def load_partition(path) -> PartitionMap:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"partition file is not JSON: {exc.msg}", offset=exc.pos) from None
    return PartitionMap.from_dict(data)


def _repair_empty(shards: list) -> list:
    """Move the lowest index of the largest shard into each empty shard."""
    shards = [sorted(s) for s in shards]
    while True:
        empty = [i for i, s in enumerate(shards) if not s]
        if not empty:
            return shards
        donor = max(range(len(shards)), key=lambda i: (len(shards[i]), -i))
        shards[empty[0]].append(shards[donor].pop(0))


def partition_iid(train_indices, num_clients: int, seed: int = 0, labels=None) -> PartitionMap:
    """Shuffle and deal round-robin so shard sizes differ by at most one.

    With ``labels`` the deal runs class by class (shuffled within class), which
    also keeps every client's per-class count within one of the mean.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if num_clients < 1:
        raise ConfigurationError("num_clients must be positive")
    if num_clients > len(train_indices):
        raise InputError(f"{num_clients} clients but only {len(train_indices)} training samples")
    if labels is None:
        order = rng_from(seed, 0).permutation(train_indices)
    else:
        labels = np.asarray(labels)
        train_labels = labels[train_indices]
        order = np.concatenate(
            [rng_from(seed, int(c)).permutation(train_indices[train_labels == c]) for c in np.unique(train_labels)]
        )
    shards = [order[i::num_clients].tolist() for i in range(num_clients)]
    return PartitionMap(shards, seed=seed, mode="iid")


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; ties in remainder go to the lower index."""
    q = np.asarray(proportions, dtype=np.float64)
    q = q / q.sum()
    raw = q * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        rem = raw - counts
        order = sorted(range(len(q)), key=lambda i: (-rem[i], i))
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(train_indices, labels, num_clients: int, beta: float = 0.1, seed: int = 0) -> PartitionMap:
    """Label-skewed partition: each class is split across clients by a Dir(beta) draw."""
    if not beta > 0:
        raise ConfigurationError("beta must be positive")
    train_indices = np.asarray(train_indices, dtype=np.int64)
    labels = np.asarray(labels)
    if num_clients < 1:
        raise ConfigurationError("num_clients must be positive")
    if num_clients > len(train_indices):
        raise InputError(f"{num_clients} clients but only {len(train_indices)} training samples")
    train_labels = labels[train_indices]
    shards = [[] for _ in range(num_clients)]
    for c in np.unique(train_labels):
        rng = rng_from(seed, int(c))
        members = rng.permutation(train_indices[train_labels == c])
        q = rng.dirichlet(np.full(num_clients, float(beta)))
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # every gamma draw underflowed; fall back to a single winner
            q = np.zeros(num_clients)
            q[rng.integers(num_clients)] = 1.0
        for i, chunk in enumerate(split_by_counts(members, q)):
            shards[i].extend(int(k) for k in chunk)
    return PartitionMap(_repair_empty(shards), seed=seed, mode="dirichlet", beta=float(beta))


def split_by_counts(members, proportions) -> list:
    """Split ``members`` in order into consecutive chunks sized by largest remainder."""
    counts = largest_remainder(proportions, len(members))
    return [list(c) for c in np.split(np.asarray(members), np.cumsum(counts)[:-1])]


def label_entropy(hist) -> np.ndarray:
    """Shannon entropy (nats) of each row of a client-by-class histogram."""
    hist = np.asarray(hist, dtype=np.float64)
    p = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)
