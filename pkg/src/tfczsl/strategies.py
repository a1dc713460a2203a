"""Training regimes as deterministic state machines over a stream of samples.

Modes:

``offline``        all training data at once, epoch-based (upper bound)
``sequential``     one block/task at a time, no replay, no distillation
``task_agnostic``  task boundaries known in training; replay + distillation
``task_free_1``    reservoir fills -> one multi-epoch pass over memory, then
                   single-step updates each time the micro-batch buffer fills
``task_free_2``    multi-epoch training each time the short-term buffer fills

Every phase and every stored/offered sample is written to a
:class:`TrainerEventLog`, so a run can be compared step-for-step against a
reference trace.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, TrainingError
from .replay import (MemoryEntry, ReservoirMemory, Sample, ShortTermMemory,
                     capture_dark_knowledge, sample_replay_batch)
from .vae import TERMS, Batch, CadaVae, DarkKnowledge, LossOptions, LossWeights, VaeOptimizer, loss_and_grads

log = logging.getLogger(__name__)

MODES = ("offline", "sequential", "task_agnostic", "task_free_1", "task_free_2")
EVENTS = ("sample_offered", "reservoir_inserted", "one_time_optimization", "micro_batch_train",
          "stm_train", "task_boundary_train", "epoch_completed")
REPLAY_MODES = ("task_agnostic", "task_free_1", "task_free_2")


@dataclass
class TrainerConfig:
    mode: str = "task_free_2"
    epochs: int = 15
    batch_size: int = 32
    replay_batch_size: Optional[int] = None  # None: match the current-data count (1:1)
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    memory_capacity: int = 140
    mb_capacity: int = 32
    mst_capacity: int = 256
    seed: int = 0
    kd_enabled: bool = True
    kd_symmetric: bool = False
    ca_use_mean: bool = False
    final_flush: bool = False
    dark_capture: str = "after_training"  # or "insertion"

    def __post_init__(self):
        if self.dark_capture not in ("after_training", "insertion"):
            raise ConfigError(f"unknown dark_capture {self.dark_capture!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("epochs", "batch_size", "memory_capacity", "mb_capacity", "mst_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.replay_batch_size is not None and self.replay_batch_size < 1:
            raise ConfigError("replay_batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    @property
    def loss_options(self) -> LossOptions:
        return LossOptions(kd_symmetric=self.kd_symmetric, ca_use_mean=self.ca_use_mean)


@dataclass
class Event:
    step: int
    event: str
    memory_size: int
    stm_size: int
    seen_count: int
    losses: dict = field(default_factory=dict)


class TrainerEventLog:
    columns = ("index", "step", "event", "memory_size", "stm_size", "seen_count",
               "loss_total", *(f"loss_{t}" for t in TERMS))

    def __init__(self):
        self.events: list[Event] = []

    def add(self, ev: Event) -> Event:
        self.events.append(ev)
        return ev

    def names(self) -> list[str]:
        return [e.event for e in self.events]

    def trace(self) -> list[tuple]:
        """(event, step, memory_size, stm_size) rows; what trace tests compare."""
        return [(e.event, e.step, e.memory_size, e.stm_size) for e in self.events]

    def count(self, name: str) -> int:
        return sum(e.event == name for e in self.events)

    def __len__(self):
        return len(self.events)

    def rows(self) -> Iterator[list]:
        for i, e in enumerate(self.events):
            losses = [e.losses.get("total", "")] + [e.losses.get(t, "") for t in TERMS]
            yield [i, e.step, e.event, e.memory_size, e.stm_size, e.seen_count, *losses]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            w.writerows(self.rows())


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each source of randomness in training."""
    names = ("reservoir", "replay", "noise", "shuffle")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def queue_stream(q: "queue.Queue", sentinel=None) -> Iterator[Sample]:
    """Consume samples from a (bounded) queue until ``sentinel`` arrives."""
    while True:
        item = q.get()
        if item is sentinel:
            return
        yield item


@dataclass
class Checkpoint:
    """Model snapshot plus the seen-class samples the trainer still holds."""

    model: CadaVae
    pool: list[Sample]
    label: str = "final"


class Trainer:
    def __init__(self, model: CadaVae, cfg: TrainerConfig):
        self.model = model
        self.cfg = cfg
        self.opt = VaeOptimizer(model, cfg.lr)
        self.rngs = rng_streams(cfg.seed)
        self.memory = ReservoirMemory(cfg.memory_capacity) if cfg.mode in REPLAY_MODES else None
        self.stm: Optional[ShortTermMemory] = None
        self.log = TrainerEventLog()
        self.checkpoints: list[Checkpoint] = []
        self.pool: list[Sample] = []

    # -- bookkeeping -------------------------------------------------------
    @property
    def steps(self) -> int:
        return self.opt.step_count

    def _event(self, name: str, losses=None) -> Event:
        mem = self.memory
        return self.log.add(Event(
            self.steps, name,
            len(mem) if mem is not None else 0,
            len(self.stm) if self.stm is not None else 0,
            mem.seen_count if mem is not None else 0,
            dict(losses or {}),
        ))

    def _offer(self, s: Sample, trained: bool = False) -> None:
        """Offer ``s`` to the reservoir. ``trained`` marks that the model has
        already learned from ``s``, so its statistics are final."""
        self._event("sample_offered")
        settled = trained or self.cfg.dark_capture == "insertion"
        entry = MemoryEntry(s, capture_dark_knowledge(self.model, s), settled)
        if self.memory.insert(entry, self.rngs["reservoir"]):
            self._event("reservoir_inserted")

    def _settle(self, trained: Sequence[Sample]) -> None:
        """Re-capture provisional dark knowledge for samples just trained on."""
        ids = {id(s) for s in trained}
        for e in self.memory.entries:
            if not e.settled and id(e.sample) in ids:
                e.dark = capture_dark_knowledge(self.model, e.sample)
                e.settled = True

    # -- optimization primitives ---------------------------------------------
    def train_step(self, current: Sequence[Sample], replayed: Sequence[MemoryEntry] = ()) -> dict:
        """One optimizer step on ``current`` rows joined with ``replayed`` rows."""
        xs = [s.x for s in current] + [e.sample.x for e in replayed]
        as_ = [s.a for s in current] + [e.sample.a for e in replayed]
        kd_mask = np.zeros(len(xs), dtype=bool)
        dark = None
        if replayed and self.cfg.kd_enabled:
            kd_mask[len(current):] = [e.settled for e in replayed]
            zeros = np.zeros(self.model.latent_dim)
            filler = DarkKnowledge(zeros, zeros, zeros, zeros)
            dark = DarkKnowledge.stack([filler] * len(current) + [e.dark for e in replayed])
        batch = Batch(np.stack(xs), np.stack(as_), kd_mask, dark)
        weights = self.cfg.weights
        if not self.cfg.kd_enabled:
            weights = replace(weights, alpha=0.0)
        total, terms, grads = loss_and_grads(
            self.model, batch, weights, self.steps, rng=self.rngs["noise"],
            options=self.cfg.loss_options)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {self.steps}")
        self.opt.step(grads)
        return {"total": total, **terms}

    def _replay(self, k: int) -> list[MemoryEntry]:
        if self.memory is None:
            return []
        return sample_replay_batch(self.memory, k, self.rngs["replay"])

    def _shuffled(self, items: Sequence) -> list:
        perm = self.rngs["shuffle"].permutation(len(items))
        return [items[i] for i in perm]

    def run_epochs(self, current: Sequence[Sample], epochs: int, replay: bool) -> dict:
        """Minibatches of ``batch_size`` current samples, each joined with a replay batch."""
        b = self.cfg.batch_size
        rb = self.cfg.replay_batch_size
        summary = {}
        for _ in range(epochs):
            acc = []
            order = self._shuffled(current)
            for i in range(0, len(order), b):
                chunk = order[i:i + b]
                replayed = self._replay(rb or len(chunk)) if replay else []
                acc.append(self.train_step(chunk, replayed))
            summary = _mean_losses(acc)
            self._event("epoch_completed", summary)
        return summary

    def run_pooled_epochs(self, current: Sequence[Sample], epochs: int) -> dict:
        """Per epoch: draw a replay set, then split current and replay evenly
        over ceil((|current| + |replay|) / batch_size) joint minibatches."""
        b = self.cfg.batch_size
        summary = {}
        for _ in range(epochs):
            replayed = self._replay(self.cfg.replay_batch_size or len(current))
            k = max(1, math.ceil((len(current) + len(replayed)) / b))
            cur_parts = _split_even(self._shuffled(current), k)
            rep_parts = _split_even(replayed, k)
            acc = [self.train_step(c, r) for c, r in zip(cur_parts, rep_parts) if c or r]
            summary = _mean_losses(acc)
            self._event("epoch_completed", summary)
        return summary

    # -- modes ---------------------------------------------------------------
    def train_offline(self, samples: Sequence[Sample]) -> CadaVae:
        samples = list(samples)
        if not samples:
            raise TrainingError("empty dataset")
        self.run_epochs(samples, self.cfg.epochs, replay=False)
        self.pool = samples
        self.checkpoints.append(self.snapshot("final"))
        return self.model

    def train_sequential(self, groups: Sequence[Sequence[Sample]]) -> CadaVae:
        groups = [list(g) for g in groups]
        if not any(groups):
            raise TrainingError("empty stream")
        for t, group in enumerate(groups):
            if not group:
                continue
            ev = self._event("task_boundary_train")
            ev.losses = self.run_epochs(group, self.cfg.epochs, replay=False)
            self.pool = group
            self.checkpoints.append(self.snapshot(f"task{t + 1}"))
        return self.model

    def train_task_agnostic(self, tasks: Sequence[Sequence[Sample]]) -> CadaVae:
        tasks = [list(t) for t in tasks]
        if len(tasks) < 2:
            raise TrainingError("task-agnostic training needs at least 2 tasks")
        for t, task in enumerate(tasks):
            ev = self._event("task_boundary_train")
            ev.losses = self.run_epochs(task, self.cfg.epochs, replay=True)
            for s in task:
                self._offer(s, trained=True)
            held = {id(e.sample) for e in self.memory.entries}
            self.pool = self.memory.samples() + [s for s in task if id(s) not in held]
            self.checkpoints.append(self.snapshot(f"task{t + 1}"))
        return self.model

    def train_task_free_1(self, stream: Iterable[Sample]) -> CadaVae:
        self.stm = ShortTermMemory(self.cfg.mb_capacity)
        optimization_done = False
        for s in stream:
            self._offer(s)
            if self.memory.full and not optimization_done:
                # Memory contents are being learned for the first time, so they
                # enter as current rows: nothing is replayed and no distillation.
                ev = self._event("one_time_optimization")
                current = self.memory.samples()
                ev.losses = self.run_epochs(current, self.cfg.epochs, replay=False)
                self._settle(current)
                optimization_done = True
            elif optimization_done:
                self.stm.add(s)
                if self.stm.full:
                    ev = self._event("micro_batch_train")
                    current = self.stm.drain()
                    ev.losses = self.train_step(current, self._replay(len(current)))
                    self._settle(current)
        if not optimization_done:
            log.warning("stream ended before replay memory filled (%d < %d); model untrained",
                        self.memory.seen_count, self.memory.capacity)
        self.pool = self.memory.samples()
        self.checkpoints.append(self.snapshot("final"))
        return self.model

    def train_task_free_2(self, stream: Iterable[Sample]) -> CadaVae:
        self.stm = ShortTermMemory(self.cfg.mst_capacity)
        trained = False
        for s in stream:
            self._offer(s)
            self.stm.add(s)
            if self.stm.full:
                self._stm_train()
                trained = True
        if len(self.stm) and self.cfg.final_flush:
            self._stm_train()
            trained = True
        if not trained:
            log.warning("stream ended before short-term memory filled; model untrained")
        self.pool = self.memory.samples()
        self.checkpoints.append(self.snapshot("final"))
        return self.model

    def _stm_train(self) -> None:
        ev = self._event("stm_train")
        current = list(self.stm.buffer)
        ev.losses = self.run_pooled_epochs(current, self.cfg.epochs)
        self._settle(current)
        self.stm.drain()

    def snapshot(self, label: str) -> Checkpoint:
        return Checkpoint(self.model.copy(), list(self.pool), label)


def _mean_losses(acc: list[dict]) -> dict:
    if not acc:
        return {}
    return {k: float(np.mean([a[k] for a in acc])) for k in acc[0]}


def _split_even(items: list, k: int) -> list[list]:
    """k contiguous parts whose sizes differ by at most one (larger first)."""
    q, r = divmod(len(items), k)
    out, i = [], 0
    for j in range(k):
        size = q + (j < r)
        out.append(items[i:i + size])
        i += size
    return out


def train_offline(model, dataset, cfg: TrainerConfig) -> Trainer:
    tr = Trainer(model, cfg)
    tr.train_offline(dataset)
    return tr


def train_sequential(model, stream_groups, cfg: TrainerConfig) -> Trainer:
    tr = Trainer(model, cfg)
    tr.train_sequential(stream_groups)
    return tr


def train_task_agnostic(model, task_list, cfg: TrainerConfig) -> Trainer:
    tr = Trainer(model, cfg)
    tr.train_task_agnostic(task_list)
    return tr


def train_task_free_1(model, stream, cfg: TrainerConfig) -> Trainer:
    tr = Trainer(model, cfg)
    tr.train_task_free_1(stream)
    return tr


def train_task_free_2(model, stream, cfg: TrainerConfig) -> Trainer:
    tr = Trainer(model, cfg)
    tr.train_task_free_2(stream)
    return tr
