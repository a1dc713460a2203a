"""End-to-end runs: data -> training -> per-checkpoint classifier -> report."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore
from ._backend import NAME as BACKEND
from .classifier import fit_for_pool, predict
from .config import ExperimentConfig
from .data import (ZslDataset, load_dataset, make_class_block_stream, make_task_splits,
                   synth_dataset, task_streams)
from .errors import CheckpointError
from .evaluation import CzslReport, eval_task_agnostic, eval_task_free
from .replay import Sample
from .strategies import Checkpoint, Trainer
from .vae import CadaVae

CHECKPOINT_DIR = "checkpoints"


def _seed_rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose]))


def build_dataset(cfg: ExperimentConfig) -> ZslDataset:
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    return synth_dataset(**cfg.synth.model_dump())


def build_model(cfg: ExperimentConfig, ds: ZslDataset) -> CadaVae:
    return CadaVae.create(ds.feature_dim, ds.attribute_dim, cfg.model.latent_dim,
                          _seed_rng(cfg.seed, 1), hidden=cfg.model.hidden)


@dataclass
class TrainResult:
    trainer: Trainer
    dataset: ZslDataset
    split: Optional[object] = None


def train(cfg: ExperimentConfig, ds: Optional[ZslDataset] = None) -> TrainResult:
    ds = ds if ds is not None else build_dataset(cfg)
    model = build_model(cfg, ds)
    trained_classes = len(set(ds.labels[ds.train_idx].tolist()))
    tr = Trainer(model, cfg.trainer_config(trained_classes))
    mode = cfg.trainer.mode
    if cfg.protocol == "task_agnostic":
        split = make_task_splits(ds, cfg.num_tasks, cfg.seed)
        tasks = task_streams(ds, split, cfg.seed)
        if mode == "sequential":
            tr.train_sequential(tasks)
        else:
            tr.train_task_agnostic(tasks)
        return TrainResult(tr, ds, split)
    stream = make_class_block_stream(ds, cfg.block_class_count, cfg.seed)
    if mode == "offline":
        tr.train_offline(list(stream))
    elif mode == "sequential":
        tr.train_sequential(stream.block_samples)
    elif mode == "task_free_1":
        tr.train_task_free_1(iter(stream))
    else:
        tr.train_task_free_2(iter(stream))
    return TrainResult(tr, ds, None)


def _predictor(clf, model):
    return lambda X, allowed: predict(clf, model, X, allowed)


def evaluate(cfg: ExperimentConfig, checkpoints: list[Checkpoint], ds: ZslDataset) -> CzslReport:
    """Fit a fresh classifier per checkpoint and compute the protocol's metrics."""
    ccfg = cfg.classifier_config()
    rng = _seed_rng(cfg.seed, 2)
    if cfg.protocol == "task_free":
        ck = checkpoints[-1]
        unseen = {c: ds.attributes[c] for c in ds.unseen_classes}
        clf = fit_for_pool(ck.model, ck.pool, unseen, ds.num_classes, ccfg, rng)
        return eval_task_free(_predictor(clf, ck.model), ds, ck.label)
    split = make_task_splits(ds, cfg.num_tasks, cfg.seed)
    predictors = []
    for t, ck in enumerate(checkpoints, start=1):
        unseen = {c: ds.attributes[c] for c in split.unseen_after(t)}
        clf = fit_for_pool(ck.model, ck.pool, unseen, ds.num_classes, ccfg, rng)
        predictors.append(_predictor(clf, ck.model))
    return eval_task_agnostic(predictors, ds, split)


def run(cfg: ExperimentConfig, ds: Optional[ZslDataset] = None) -> tuple[TrainResult, CzslReport]:
    result = train(cfg, ds)
    return result, evaluate(cfg, result.trainer.checkpoints, result.dataset)


def headline(report: CzslReport) -> float:
    """H for task-free runs, mH for task-agnostic runs."""
    if report.protocol == "task_free":
        return report.rows[-1]["H"]
    return report.aggregates["mH"]


# -- run directories ---------------------------------------------------------------

def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays, meta = ck.model.to_arrays()
    if ck.pool:
        arrays["pool/x"] = np.stack([s.x for s in ck.pool])
        arrays["pool/y"] = np.array([s.y for s in ck.pool], dtype=np.int64)
        arrays["pool/a"] = np.stack([s.a for s in ck.pool])
    nncore.write_npz(path, arrays, {"kind": "czsl_checkpoint", "model": meta,
                                    "label": ck.label, "pool_size": len(ck.pool)})


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = nncore.read_npz(path)
    if meta.get("kind") != "czsl_checkpoint":
        raise CheckpointError(f"{path} is not a run checkpoint")
    model = CadaVae.from_arrays(arrays, meta["model"])
    pool = [Sample(arrays["pool/x"][i], int(arrays["pool/y"][i]), arrays["pool/a"][i])
            for i in range(meta["pool_size"])]
    return Checkpoint(model, pool, meta["label"])


def write_run(run_dir, cfg: ExperimentConfig, result: TrainResult) -> Path:
    run_dir = Path(run_dir)
    (run_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    tr = result.trainer
    checkpoints = tr.checkpoints
    if cfg.protocol == "task_free":
        checkpoints = checkpoints[-1:]
    names = []
    for i, ck in enumerate(checkpoints, start=1):
        name = f"ckpt_{i:02d}_{ck.label}.npz"
        save_checkpoint(ck, run_dir / CHECKPOINT_DIR / name)
        names.append(name)
    if tr.memory is not None:
        tr.memory.save(run_dir / "memory.npz")
    tr.log.to_csv(run_dir / "events.csv")
    meta = {
        "name": cfg.run_name,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
        "checkpoints": names,
        "optimizer_steps": tr.steps,
        "memory_capacity": tr.cfg.memory_capacity,
        "backend": BACKEND,
    }
    (run_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return run_dir


def read_run(run_dir) -> tuple[ExperimentConfig, list[Checkpoint]]:
    run_dir = Path(run_dir)
    mpath = run_dir / "metadata.json"
    if not mpath.exists():
        raise CheckpointError(f"{run_dir} has no metadata.json")
    meta = json.loads(mpath.read_text())
    cfg = ExperimentConfig.model_validate(meta["config"])
    cks = [load_checkpoint(run_dir / CHECKPOINT_DIR / n) for n in meta["checkpoints"]]
    return cfg, cks
