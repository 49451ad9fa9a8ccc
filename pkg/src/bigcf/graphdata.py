"""Interaction data: loading, splitting, normalized adjacency, batch sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import SparseMat
from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)


@dataclass
class InteractionDataset:
    """Users and items with 0-based dense ids; sorted, deduplicated item lists."""

    num_users: int
    num_items: int
    train: list[np.ndarray]
    test: list[np.ndarray]
    duplicates_dropped: int = 0
    _keys: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.train) != self.num_users or len(self.test) != self.num_users:
            raise DataError("train/test lists must have one entry per user")
        for lists in (self.train, self.test):
            for u, items in enumerate(lists):
                if len(items) and (items[0] < 0 or items[-1] >= self.num_items):
                    raise DataError(f"user {u}: item id out of range [0, {self.num_items})")
        for u in range(self.num_users):
            if len(self.train[u]) and len(self.test[u]) and np.intersect1d(
                    self.train[u], self.test[u], assume_unique=True).size:
                raise DataError(f"user {u}: train and test overlap")

    @property
    def num_train(self) -> int:
        return int(sum(len(x) for x in self.train))

    @property
    def num_test(self) -> int:
        return int(sum(len(x) for x in self.test))

    @property
    def sparsity(self) -> float:
        return 1.0 - (self.num_train + self.num_test) / (self.num_users * self.num_items)

    def train_degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self.train], dtype=np.int64)

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        deg = self.train_degrees()
        users = np.repeat(np.arange(self.num_users), deg)
        items = np.concatenate(self.train) if self.num_train else np.zeros(0, np.int64)
        return users, items.astype(np.int64)

    def is_train(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs in the train set."""
        if self._keys is None:
            u, i = self.train_pairs()
            self._keys = np.sort(u * self.num_items + i)
        keys = np.asarray(users, np.int64) * self.num_items + np.asarray(items, np.int64)
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys

    def summary(self) -> str:
        return (f"users={self.num_users} items={self.num_items} "
                f"interactions={self.num_train + self.num_test} "
                f"(train={self.num_train}, test={self.num_test}) "
                f"sparsity={100 * self.sparsity:.2f}%")


def _read_adjacency(path, what: str) -> dict[int, list[int]]:
    rows: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids = [int(p) for p in parts]
            except ValueError:
                raise ParseError(path, line_no, f"non-integer token in {what} line") from None
            if min(ids) < 0:
                raise ParseError(path, line_no, "negative id")
            rows.setdefault(ids[0], []).extend(ids[1:])
    return rows


def _to_lists(rows: dict[int, list[int]], num_users: int) -> tuple[list[np.ndarray], int]:
    lists = [np.zeros(0, dtype=np.int64)] * num_users
    dropped = 0
    for u, items in rows.items():
        arr = np.unique(np.asarray(items, dtype=np.int64))
        dropped += len(items) - len(arr)
        lists[u] = arr
    return lists, dropped


def from_lists(train: list, test: list | None = None, num_users: int | None = None,
               num_items: int | None = None) -> InteractionDataset:
    """Build a dataset from per-user item lists (test items seen in train are dropped)."""
    rows_tr = {u: list(x) for u, x in enumerate(train)}
    rows_te = {u: list(x) for u, x in enumerate(test or [])}
    return _assemble(rows_tr, rows_te, num_users, num_items)


def _assemble(rows_tr, rows_te, num_users=None, num_items=None) -> InteractionDataset:
    all_users = list(rows_tr) + list(rows_te)
    all_items = [i for r in (rows_tr, rows_te) for items in r.values() for i in items]
    m = max(all_users, default=-1) + 1
    n = max(all_items, default=-1) + 1
    if num_users is not None:
        if m > num_users:
            raise DataError(f"user id {m - 1} out of range for {num_users} users")
        m = num_users
    if num_items is not None:
        if n > num_items:
            raise DataError(f"item id {n - 1} out of range for {num_items} items")
        n = num_items
    train, d1 = _to_lists(rows_tr, m)
    test, d2 = _to_lists(rows_te, m)
    overlap = 0
    for u in range(m):
        if len(train[u]) and len(test[u]):
            keep = ~np.isin(test[u], train[u])
            overlap += int((~keep).sum())
            test[u] = test[u][keep]
    if overlap:
        log.warning("dropped %d test interactions already present in train", overlap)
    if d1 + d2:
        log.info("deduplicated %d repeated interactions", d1 + d2)
    return InteractionDataset(m, n, train, test, duplicates_dropped=d1 + d2)


def load_dataset(train_path, test_path=None, seed: int = 2024,
                 num_users: int | None = None, num_items: int | None = None) -> InteractionDataset:
    """Read adjacency-list files ("u i1 i2 ..." per line).

    Without a test file an 80/20 per-user random split is drawn from ``seed``.
    """
    for p in (train_path, test_path):
        if p is not None and not Path(p).is_file():
            raise DataError(f"no such file: {p}")
    rows_tr = _read_adjacency(train_path, "train")
    if test_path is None:
        ds = _assemble(rows_tr, {}, num_users, num_items)
        ds = split_per_user(ds, 0.2, np.random.default_rng(seed))
    else:
        rows_te = _read_adjacency(test_path, "test")
        ds = _assemble(rows_tr, rows_te, num_users, num_items)
    if ds.num_test == 0:
        log.warning("test set is empty; evaluation will cover zero users")
    log.info("loaded %s", ds.summary())
    return ds


def write_dataset(ds: InteractionDataset, train_path, test_path):
    for path, lists in ((train_path, ds.train), (test_path, ds.test)):
        with open(path, "w", encoding="utf-8") as fh:
            for u, items in enumerate(lists):
                # every user gets a train line so ids survive a reload
                if len(items) or lists is ds.train:
                    fh.write(" ".join(map(str, [u, *items.tolist()])) + "\n")


def split_per_user(ds: InteractionDataset, fraction: float,
                   rng: np.random.Generator) -> InteractionDataset:
    """Move ``fraction`` of each user's train items into the test slot.

    Existing test items are discarded; users keep at least one train item.
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    train, test = [], []
    for items in ds.train:
        k = int(round(fraction * len(items)))
        k = min(k, len(items) - 1) if len(items) else 0
        perm = rng.permutation(len(items))
        test.append(np.sort(items[perm[:k]]))
        train.append(np.sort(items[perm[k:]]))
    return InteractionDataset(ds.num_users, ds.num_items, train, test)


def holdout_validation(ds: InteractionDataset, fraction: float,
                       rng: np.random.Generator) -> tuple[InteractionDataset, InteractionDataset]:
    """(reduced train with original test, reduced train with validation as test)."""
    val = split_per_user(ds, fraction, rng)
    fit_ds = InteractionDataset(ds.num_users, ds.num_items, val.train, ds.test)
    return fit_ds, val


def build_normalized_adjacency(ds: InteractionDataset) -> SparseMat:
    """Symmetric D^-1/2 A D^-1/2 over the (M+N)-node bipartite graph."""
    users, items = ds.train_pairs()
    if not len(users):
        raise DataError("cannot build adjacency without train edges")
    m = ds.num_users
    deg_u = np.bincount(users, minlength=m).astype(np.float64)
    deg_i = np.bincount(items, minlength=ds.num_items).astype(np.float64)
    w = 1.0 / np.sqrt(deg_u[users] * deg_i[items])
    rows = np.concatenate([users, items + m])
    cols = np.concatenate([items + m, users])
    n = m + ds.num_items
    return SparseMat.from_coo(rows, cols, np.concatenate([w, w]), (n, n))


@dataclass
class TrainBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    reg_users: np.ndarray
    reg_items: np.ndarray

    def __len__(self):
        return len(self.users)


class BatchSampler:
    """BPR triples: a uniform train edge plus a uniform non-interacted item."""

    def __init__(self, ds: InteractionDataset):
        self.ds = ds
        users, items = ds.train_pairs()
        full = ds.train_degrees() >= ds.num_items
        if full.any():
            log.warning("%d users interacted with every item; they are skipped "
                        "(no negatives exist)", int(full.sum()))
            keep = ~full[users]
            users, items = users[keep], items[keep]
        if not len(users):
            raise DataError("no user has a negative item to sample")
        self.degenerate_users = np.flatnonzero(full)
        self.users, self.items = users, items

    def sample(self, batch_size: int, rng: np.random.Generator) -> TrainBatch:
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        e = rng.integers(0, len(self.users), size=batch_size)
        u, i = self.users[e], self.items[e]
        j = rng.integers(0, self.ds.num_items, size=batch_size)
        bad = self.ds.is_train(u, j)
        while bad.any():
            j[bad] = rng.integers(0, self.ds.num_items, size=int(bad.sum()))
            bad[bad] = self.ds.is_train(u[bad], j[bad])
        return TrainBatch(u, i, j, np.unique(u), np.unique(i))


def sample_batch(ds: InteractionDataset, batch_size: int, rng: np.random.Generator) -> TrainBatch:
    return BatchSampler(ds).sample(batch_size, rng)


BUCKET_NAMES = ("sparse", "normal", "popular")


def sparsity_buckets(ds: InteractionDataset) -> dict[str, np.ndarray]:
    """Terciles of test users by train-interaction count, ties by user id."""
    users = np.array([u for u in range(ds.num_users) if len(ds.test[u])], dtype=np.int64)
    if len(users) < 3:
        log.warning("fewer than 3 test users; using a single bucket")
        return {"all": users}
    deg = ds.train_degrees()[users]
    order = users[np.lexsort((users, deg))]
    return {name: np.sort(part) for name, part in zip(BUCKET_NAMES, np.array_split(order, 3))}
