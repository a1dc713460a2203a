"""Datasets, protocol splitters, streams and the synthetic ZSL generator.

On-disk layout of a dataset directory::

    manifest.json     dimensions, class names, seen/unseen lists, split
                      indices and the matrix encoding ("npy" or "csv")
    features.{npy,csv}    [n, d_x] float64
    attributes.{npy,csv}  [C, d_a] float64, row c = class c
    labels.{npy,csv}      [n] int64 class ids in [0, C)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError
from .replay import Sample

FORMAT_VERSION = 1


class MissingFileError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class MissingAttributeError(DataError):
    pass


class UnseenLeakError(DataError):
    """An unseen class has training samples."""


@dataclass
class ZslDataset:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    seen_classes: list[int]
    unseen_classes: list[int]
    train_idx: np.ndarray
    test_idx: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        self.seen_classes = [int(c) for c in self.seen_classes]
        self.unseen_classes = [int(c) for c in self.unseen_classes]
        if not self.class_names:
            self.class_names = [f"class{c:03d}" for c in range(self.num_classes)]
        self.validate()

    @property
    def num_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attribute_dim(self) -> int:
        return self.attributes.shape[1]

    def validate(self) -> None:
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeMismatchError(f"features {self.features.shape} vs {n} labels")
        if self.attributes.ndim != 2:
            raise ShapeMismatchError("attributes must be a matrix")
        if len(self.class_names) != self.num_classes:
            raise ShapeMismatchError(
                f"{len(self.class_names)} class names for {self.num_classes} attribute rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels.max())
            raise MissingAttributeError(f"label {bad} has no attribute row")
        seen, unseen = set(self.seen_classes), set(self.unseen_classes)
        if seen & unseen:
            raise DataError(f"classes both seen and unseen: {sorted(seen & unseen)}")
        if seen | unseen != set(range(self.num_classes)):
            raise DataError("seen and unseen lists must cover every class exactly once")
        for idx, what in ((self.train_idx, "train"), (self.test_idx, "test")):
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ShapeMismatchError(f"{what} index out of range")
        if len(np.intersect1d(self.train_idx, self.test_idx)):
            raise DataError("train and test indices overlap")
        leaked = sorted(set(self.labels[self.train_idx].tolist()) & unseen)
        if leaked:
            raise UnseenLeakError(f"unseen classes with training samples: "
                                  f"{[self.class_names[c] for c in leaked]}")

    def sample(self, i: int, task_id=None) -> Sample:
        y = int(self.labels[i])
        return Sample(self.features[i], y, self.attributes[y], task_id)

    def samples(self, idx, task_id=None) -> list[Sample]:
        return [self.sample(int(i), task_id) for i in idx]

    def indices_of(self, classes, split: str = "train") -> np.ndarray:
        idx = self.train_idx if split == "train" else self.test_idx
        return idx[np.isin(self.labels[idx], list(classes))]

    def __eq__(self, other):
        if not isinstance(other, ZslDataset):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
            and self.seen_classes == other.seen_classes
            and self.unseen_classes == other.unseen_classes
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.test_idx, other.test_idx)
            and self.class_names == other.class_names
        )


# -- file format ---------------------------------------------------------------

def _write_matrix(path: Path, arr: np.ndarray, encoding: str) -> None:
    if encoding == "npy":
        np.save(path, arr, allow_pickle=False)
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in np.atleast_2d(arr.reshape(len(arr), -1)):
                w.writerow([repr(float(v)) if arr.dtype.kind == "f" else int(v) for v in row])


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row]


def save_dataset(ds: ZslDataset, path, encoding: str = "npy") -> Path:
    if encoding not in ("npy", "csv"):
        raise DataError(f"unknown encoding {encoding!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ext = encoding
    _write_matrix(path / f"features.{ext}", ds.features, encoding)
    _write_matrix(path / f"attributes.{ext}", ds.attributes, encoding)
    _write_matrix(path / f"labels.{ext}", ds.labels, encoding)
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoding": encoding,
        "num_samples": int(len(ds.labels)),
        "feature_dim": int(ds.feature_dim),
        "attribute_dim": int(ds.attribute_dim),
        "num_classes": int(ds.num_classes),
        "class_names": ds.class_names,
        "seen_classes": ds.seen_classes,
        "unseen_classes": ds.unseen_classes,
        "train_indices": ds.train_idx.tolist(),
        "test_indices": ds.test_idx.tolist(),
        "files": {k: f"{k}.{ext}" for k in ("features", "attributes", "labels")},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> ZslDataset:
    """Read and validate a dataset directory."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing manifest: {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: {exc}") from None
    try:
        encoding = m["encoding"]
        files = {k: path / m["files"][k] for k in ("features", "attributes", "labels")}
        names = list(m["class_names"])
        d_x, d_a, C, n = m["feature_dim"], m["attribute_dim"], m["num_classes"], m["num_samples"]
    except KeyError as exc:
        raise DataError(f"manifest lacks field {exc}") from None
    for f in files.values():
        if not f.exists():
            raise MissingFileError(f"missing data file: {f}")

    if encoding == "npy":
        features = np.load(files["features"], allow_pickle=False)
        attributes = np.load(files["attributes"], allow_pickle=False)
        labels = np.load(files["labels"], allow_pickle=False)
    elif encoding == "csv":
        rows = _read_rows(files["attributes"])
        for c, row in enumerate(rows):
            if len(row) != d_a:
                label = names[c] if c < len(names) else str(c)
                raise ShapeMismatchError(
                    f"attribute row for class {label!r} has {len(row)} values, expected {d_a}")
        attributes = np.array(rows, dtype=np.float64).reshape(len(rows), d_a)
        frows = _read_rows(files["features"])
        for i, row in enumerate(frows):
            if len(row) != d_x:
                raise ShapeMismatchError(f"feature row {i} has {len(row)} values, expected {d_x}")
        features = np.array(frows, dtype=np.float64).reshape(len(frows), d_x)
        labels = np.array([int(r[0]) for r in _read_rows(files["labels"])], dtype=np.int64)
    else:
        raise DataError(f"unknown encoding {encoding!r}")

    if attributes.shape[0] < C:
        missing = names[attributes.shape[0]] if attributes.shape[0] < len(names) else attributes.shape[0]
        raise MissingAttributeError(f"class {missing!r} has no attribute row")
    if attributes.shape != (C, d_a):
        raise ShapeMismatchError(f"attributes shape {attributes.shape} != ({C}, {d_a})")
    if features.shape != (n, d_x):
        raise ShapeMismatchError(f"features shape {features.shape} != ({n}, {d_x})")
    if labels.shape != (n,):
        raise ShapeMismatchError(f"labels shape {labels.shape} != ({n},)")
    return ZslDataset(features, labels, attributes, m["seen_classes"], m["unseen_classes"],
                      m["train_indices"], m["test_indices"], names)


# -- synthetic generator ---------------------------------------------------------

def synth_dataset(num_classes=6, unseen_count=2, per_class=10, d_x=8, d_a=4,
                  noise_sigma=0.1, seed=0, test_fraction=0.2) -> ZslDataset:
    """Classes whose feature means are a fixed linear map of their attributes.

    A random projection ``P`` [d_x, d_a] and per-class attributes ``a_c`` are
    drawn; features of class c are ``N(P a_c, noise_sigma^2 I)``. The last
    ``unseen_count`` classes get no training rows: all their samples go to
    the test split. Seen classes hold out ``test_fraction`` of their samples.
    """
    if not (0 <= unseen_count < num_classes):
        raise DataError("need 0 <= unseen_count < num_classes")
    if min(per_class, d_x, d_a) < 1 or noise_sigma < 0:
        raise DataError("sizes must be >= 1 and noise_sigma >= 0")
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((d_x, d_a)) / np.sqrt(d_a)
    attributes = rng.standard_normal((num_classes, d_a))
    labels = np.repeat(np.arange(num_classes), per_class)
    means = attributes @ P.T
    features = means[labels] + noise_sigma * rng.standard_normal((len(labels), d_x))
    seen = list(range(num_classes - unseen_count))
    unseen = list(range(num_classes - unseen_count, num_classes))
    n_test = int(round(test_fraction * per_class))
    train_idx, test_idx = [], []
    for c in range(num_classes):
        rows = np.arange(c * per_class, (c + 1) * per_class)
        if c in unseen:
            test_idx.extend(rows.tolist())
        else:
            perm = rng.permutation(rows)
            test_idx.extend(sorted(perm[:n_test].tolist()))
            train_idx.extend(sorted(perm[n_test:].tolist()))
    ds = ZslDataset(features, labels, attributes, seen, unseen, sorted(train_idx), sorted(test_idx))
    ds.projection = P
    return ds


# -- protocol splitters ----------------------------------------------------------

@dataclass
class TaskSplit:
    """Classes partitioned into T ordered tasks (task-agnostic protocol)."""

    groups: list[list[int]]
    train: list[np.ndarray]
    test: list[np.ndarray]

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def seen_upto(self, t: int) -> list[int]:
        """Classes of tasks 1..t (1-based t)."""
        return sorted(c for g in self.groups[:t] for c in g)

    def unseen_after(self, t: int) -> list[int]:
        return sorted(c for g in self.groups[t:] for c in g)

    def test_upto(self, t: int) -> np.ndarray:
        return np.sort(np.concatenate(self.test[:t])) if t else np.empty(0, dtype=np.int64)

    def test_after(self, t: int) -> np.ndarray:
        rest = self.test[t:]
        return np.sort(np.concatenate(rest)) if rest else np.empty(0, dtype=np.int64)


def make_task_splits(ds: ZslDataset, T: int, seed: int = 0) -> TaskSplit:
    """Shuffle classes with ``seed`` and cut into T near-equal groups.

    Group sizes differ by at most one, larger groups first.
    """
    C = ds.num_classes
    if T < 2:
        raise DataError("task-agnostic protocol needs T >= 2")
    if T > C:
        raise DataError(f"cannot split {C} classes into {T} tasks")
    order = np.random.default_rng(seed).permutation(C)
    groups = [sorted(g.tolist()) for g in np.array_split(order, T)]
    train = [ds.indices_of(g, "train") for g in groups]
    test = [ds.indices_of(g, "test") for g in groups]
    return TaskSplit(groups, train, test)


@dataclass
class ClassBlockStream:
    """Seen-class blocks streamed one after another (task-free protocol)."""

    blocks: list[list[int]]  # class ids per block
    block_samples: list[list[Sample]]

    def __iter__(self) -> Iterator[Sample]:
        for block in self.block_samples:
            yield from block

    def __len__(self):
        return sum(len(b) for b in self.block_samples)


def make_class_block_stream(ds: ZslDataset, block_class_count: int, seed: int = 0) -> ClassBlockStream:
    if block_class_count < 1:
        raise DataError("block_class_count must be >= 1")
    if not len(ds.train_idx):
        raise DataError("dataset has no training samples")
    rng = np.random.default_rng(seed)
    classes = [ds.seen_classes[i] for i in rng.permutation(len(ds.seen_classes))]
    blocks = [sorted(classes[i:i + block_class_count])
              for i in range(0, len(classes), block_class_count)]
    block_samples = []
    for block in blocks:
        idx = ds.indices_of(block, "train")
        block_samples.append(ds.samples(idx[rng.permutation(len(idx))]))
    return ClassBlockStream(blocks, block_samples)


def task_streams(ds: ZslDataset, split: TaskSplit, seed: int = 0) -> list[list[Sample]]:
    """Per-task training samples carrying their task id, shuffled within task."""
    rng = np.random.default_rng(seed)
    out = []
    for t, idx in enumerate(split.train):
        out.append(ds.samples(idx[rng.permutation(len(idx))], task_id=t))
    return out
