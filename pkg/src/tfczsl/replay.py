"""Reservoir replay memory carrying dark knowledge, and the short-term buffers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nncore
from ._backend import kernels
from .errors import CheckpointError, ShapeError
from .vae import CadaVae, DarkKnowledge

log = logging.getLogger(__name__)


@dataclass
class Sample:
    x: np.ndarray
    y: int
    a: np.ndarray
    task_id: Optional[int] = None


@dataclass
class MemoryEntry:
    """A stored sample and its dark knowledge.

    ``settled`` is False while the statistics are provisional (captured
    before the sample was ever trained on); distillation skips such entries.
    """

    sample: Sample
    dark: DarkKnowledge
    settled: bool = True


def capture_dark_knowledge(model: CadaVae, s: Sample) -> DarkKnowledge:
    """Snapshot both encoders' statistics for ``s``."""
    gv = model.encode_visual(s.x)
    ga = model.encode_attribute(s.a)
    return DarkKnowledge(gv.mean.copy(), gv.log_var.copy(), ga.mean.copy(), ga.log_var.copy())


@dataclass
class ReservoirMemory:
    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def insert(self, entry: MemoryEntry, rng: np.random.Generator) -> bool:
        """Offer ``entry``; return True if it was stored.

        Algorithm R: the l-th offered item is kept outright while l <= M,
        otherwise a slot j ~ U{0, ..., l-1} is drawn and the item replaces
        slot j when j < M (probability M/l).
        """
        self.seen_count += 1
        if self.seen_count <= self.capacity:
            self.entries.append(entry)
            return True
        j = int(rng.integers(0, self.seen_count))
        if j < self.capacity:
            self.entries[j] = entry
            return True
        return False

    def samples(self) -> list[Sample]:
        return [e.sample for e in self.entries]

    # -- dump / restore -----------------------------------------------------
    def to_arrays(self) -> tuple[dict, dict]:
        meta = {"capacity": self.capacity, "seen_count": self.seen_count, "size": len(self.entries)}
        if not self.entries:
            return {}, meta
        arrays = {
            "memory/x": np.stack([e.sample.x for e in self.entries]),
            "memory/y": np.array([e.sample.y for e in self.entries], dtype=np.int64),
            "memory/a": np.stack([e.sample.a for e in self.entries]),
            "memory/task_id": np.array(
                [-1 if e.sample.task_id is None else e.sample.task_id for e in self.entries],
                dtype=np.int64),
            "memory/settled": np.array([e.settled for e in self.entries], dtype=bool),
        }
        for f in ("mu_vf", "log_var_vf", "mu_af", "log_var_af"):
            arrays[f"memory/{f}"] = np.stack([getattr(e.dark, f) for e in self.entries])
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays, meta) -> "ReservoirMemory":
        mem = cls(int(meta["capacity"]), seen_count=int(meta["seen_count"]))
        for i in range(int(meta["size"])):
            try:
                tid = int(arrays["memory/task_id"][i])
                sample = Sample(arrays["memory/x"][i].copy(), int(arrays["memory/y"][i]),
                                arrays["memory/a"][i].copy(), None if tid < 0 else tid)
                dark = DarkKnowledge(*(arrays[f"memory/{f}"][i].copy() for f in
                                       ("mu_vf", "log_var_vf", "mu_af", "log_var_af")))
            except KeyError as exc:
                raise CheckpointError(f"memory dump lacks {exc}") from None
            settled = bool(arrays["memory/settled"][i]) if "memory/settled" in arrays else True
            mem.entries.append(MemoryEntry(sample, dark, settled))
        return mem

    def save(self, path) -> None:
        arrays, meta = self.to_arrays()
        nncore.write_npz(path, arrays, {"kind": "reservoir_memory", "memory": meta})

    @classmethod
    def load(cls, path) -> "ReservoirMemory":
        arrays, meta = nncore.read_npz(path)
        if meta.get("kind") != "reservoir_memory":
            raise CheckpointError(f"{path} is not a memory dump")
        return cls.from_arrays(arrays, meta["memory"])


def reservoir_insert(mem: ReservoirMemory, entry: MemoryEntry, rng) -> ReservoirMemory:
    mem.insert(entry, rng)
    return mem


def sample_replay_batch(mem: ReservoirMemory, k: int, rng: np.random.Generator) -> list[MemoryEntry]:
    """``k`` uniform draws; without replacement unless ``k`` exceeds the memory size."""
    if k <= 0 or not mem.entries:
        return []
    idx = rng.choice(len(mem.entries), size=k, replace=k > len(mem.entries))
    return [mem.entries[i] for i in idx]


def reservoir_fill(capacity: int, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Item indices held after streaming items ``0..n_items-1`` through Algorithm R.

    Uses the same draw convention as :meth:`ReservoirMemory.insert`, batched
    up front so the selection loop runs in the compiled kernel.
    """
    if n_items > capacity:
        tail = rng.integers(0, np.arange(capacity + 1, n_items + 1))
        draws = np.concatenate([np.zeros(capacity, dtype=np.int64), tail.astype(np.int64)])
    else:
        draws = np.zeros(n_items, dtype=np.int64)
    slots = kernels.reservoir_fill(capacity, draws)
    return slots[slots >= 0]


@dataclass
class ShortTermMemory:
    capacity: int
    buffer: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("short-term memory capacity must be >= 1")

    def __len__(self):
        return len(self.buffer)

    @property
    def full(self) -> bool:
        return len(self.buffer) >= self.capacity

    def add(self, s: Sample) -> None:
        if self.full:
            raise ShapeError("short-term memory is full; train and clear it first")
        self.buffer.append(s)

    def drain(self) -> list[Sample]:
        out, self.buffer = self.buffer, []
        return out
