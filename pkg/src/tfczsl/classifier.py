"""Latent feature synthesis and the final softmax classifier.

Seen classes are represented by latents sampled from the visual encoder on
retained samples; unseen classes by latents sampled from the attribute
encoder on their class attributes. At test time a feature vector is mapped
to its visual-encoder mean and classified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nncore
from .errors import DataError, ShapeError
from .nncore import DenseNet, Layer, OptimizerState
from .replay import Sample
from .vae import CadaVae, reparameterize

SEEN_VISUAL = "seen_visual"
UNSEEN_ATTRIBUTE = "unseen_attribute"


@dataclass
class LatentTrainingSet:
    features: np.ndarray  # [n, d_z]
    labels: np.ndarray  # [n]
    provenance: np.ndarray  # [n] of SEEN_VISUAL / UNSEEN_ATTRIBUTE

    def __len__(self):
        return len(self.labels)


def synthesize_latents(model: CadaVae, seen_samples: Sequence[Sample],
                       unseen_class_attributes: Mapping[int, np.ndarray],
                       counts=(2, 400), rng: np.random.Generator = None,
                       expect_unseen: bool = False) -> LatentTrainingSet:
    """Draw ``counts[0]`` latents per seen sample and ``counts[1]`` per unseen class."""
    per_seen, per_unseen = counts
    if expect_unseen and not unseen_class_attributes:
        raise DataError("unseen classes expected but no unseen attributes given")
    d_z = model.latent_dim
    feats, labels, prov = [], [], []
    if seen_samples and per_seen > 0:
        X = np.stack([s.x for s in seen_samples])
        g = model.encode_visual(X)
        for _ in range(per_seen):
            feats.append(reparameterize(g, rng))
            labels.append(np.array([s.y for s in seen_samples], dtype=np.int64))
            prov.append(np.full(len(seen_samples), SEEN_VISUAL))
    if unseen_class_attributes and per_unseen > 0:
        classes = sorted(unseen_class_attributes)
        A = np.stack([np.asarray(unseen_class_attributes[c], dtype=np.float64) for c in classes])
        g = model.encode_attribute(A)
        mean = np.repeat(g.mean, per_unseen, axis=0)
        log_var = np.repeat(g.log_var, per_unseen, axis=0)
        eps = rng.standard_normal(mean.shape)
        feats.append(mean + np.exp(0.5 * log_var) * eps)
        labels.append(np.repeat(np.array(classes, dtype=np.int64), per_unseen))
        prov.append(np.full(len(classes) * per_unseen, UNSEEN_ATTRIBUTE))
    if not feats:
        return LatentTrainingSet(np.empty((0, d_z)), np.empty(0, dtype=np.int64), np.empty(0, dtype=str))
    return LatentTrainingSet(np.vstack(feats), np.concatenate(labels), np.concatenate(prov))


class SoftmaxClassifier:
    """Linear layer + softmax over ``num_classes`` labels."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.net = DenseNet([Layer(weight, bias, "identity")])

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "SoftmaxClassifier":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def weight(self) -> np.ndarray:
        return self.net.layers[0].weight

    @property
    def bias(self) -> np.ndarray:
        return self.net.layers[0].bias

    @property
    def num_classes(self) -> int:
        return self.net.out_dim

    def logits(self, z) -> np.ndarray:
        return nncore.forward(self.net, z)[0]

    def loss(self, data: LatentTrainingSet) -> float:
        return float(_cross_entropy(self.logits(data.features), data.labels)[0])

    def to_arrays(self):
        return nncore.net_arrays(self.net, "classifier")

    @classmethod
    def from_arrays(cls, arrays, meta):
        net = nncore.net_from_arrays(arrays, meta, "classifier")
        return cls(net.layers[0].weight, net.layers[0].bias)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_softmax(data: LatentTrainingSet, num_classes: Optional[int] = None, epochs: int = 200,
                  lr: float = 0.01, batch_size: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None) -> SoftmaxClassifier:
    """Cross-entropy training from a zero initialization with Adam.

    ``batch_size=None`` trains full-batch (one step per epoch), which makes
    the result a function of the data distribution alone.
    """
    present = np.unique(data.labels)
    if len(present) < 2:
        raise DataError("softmax training needs at least two classes")
    if num_classes is None:
        num_classes = int(present.max()) + 1
    clf = SoftmaxClassifier.zeros(num_classes, data.features.shape[1])
    state = OptimizerState.for_net(clf.net, lr)
    n = len(data)
    for _ in range(epochs):
        if batch_size is None or batch_size >= n:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        for idx in batches:
            logits, cache = nncore.forward(clf.net, data.features[idx])
            _, g = _cross_entropy(logits, data.labels[idx])
            grads, _ = nncore.backward(clf.net, cache, g)
            nncore.adam_step(clf.net, grads, state)
    return clf


def predict(clf: SoftmaxClassifier, model: CadaVae, x, allowed: Optional[Sequence[int]] = None):
    """Argmax label from the visual-encoder mean; ties go to the lowest label.

    ``allowed`` restricts the candidate labels.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_dim:
        raise ShapeError(f"feature vector of length {x.shape[-1]}, expected {model.feature_dim}")
    z = model.encode_visual(x).mean
    logits = np.atleast_2d(clf.logits(z))
    if allowed is None:
        out = np.argmax(logits, axis=1)
    else:
        allowed = np.array(sorted(allowed), dtype=np.int64)
        out = allowed[np.argmax(logits[:, allowed], axis=1)]
    return int(out[0]) if x.ndim == 1 else out


@dataclass
class ClassifierConfig:
    seen_draws: int = 2
    unseen_draws: int = 400
    epochs: int = 200
    lr: float = 0.01
    batch_size: Optional[int] = None


def fit_for_pool(model: CadaVae, pool: Sequence[Sample], unseen_attributes: Mapping[int, np.ndarray],
                 num_classes: int, cfg: ClassifierConfig, rng) -> SoftmaxClassifier:
    """Synthesize latents for a retained pool + unseen classes and fit a fresh classifier."""
    data = synthesize_latents(model, pool, unseen_attributes, (cfg.seen_draws, cfg.unseen_draws), rng)
    return train_softmax(data, num_classes, cfg.epochs, cfg.lr, cfg.batch_size, rng)
