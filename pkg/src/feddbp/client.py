"""Client-side runtime: local SGD, prototype extraction, uploads and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DegenerateInputError, ProtocolError, TrainingError
from .fisher import channel_scores
from .models import ClientModel, embed, forward_dual
from .objectives import (
    LossBreakdown,
    LossConfig,
    contrastive_decision_loss,
    cross_entropy,
    l2_alignment_loss,
    normalized_prototype_matrix,
    total_loss,
)
from .prototypes import ImportanceScores, PrototypeKind, PrototypeSet
from .tensor import NORM_EPS, Tape

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ClientUpload:
    client_id: int
    prototypes: PrototypeSet
    scores: ImportanceScores
    n_k: int

    def __eq__(self, other):
        if not isinstance(other, ClientUpload):
            return NotImplemented
        return (self.client_id == other.client_id and self.n_k == other.n_k
                and self.prototypes == other.prototypes and self.scores == other.scores)


def _train_step(model: ClientModel, x, y, prototypes, cfg: LossConfig, lr: float):
    tape = Tape()
    bound = model.bind(tape)
    out = forward_dual(model, x, tape, bound)
    parts, margin = {}, 0.0
    if out.z_s is not None:
        parts["l_sce"] = cross_entropy(tape, out.logits_s, y)
    if out.z_d is not None:
        parts["l_dce"] = cross_entropy(tape, out.logits_d, y)
    if prototypes is not None:
        if out.z_s is not None:
            parts["l_s"] = l2_alignment_loss(tape, out.z_s, y, prototypes)
        if out.z_d is not None:
            parts["l_d"], margin = contrastive_decision_loss(tape, out.z_d, y, prototypes, cfg)
    loss = total_loss(tape, parts, cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise DegenerateInputError("non-finite loss")
    tape.backward(loss)
    if lr != 0.0:
        for name, t in bound.items():
            model.params[name] = model.params[name] - lr * t.grad
    return LossBreakdown(
        l_sce=parts["l_sce"].item() if "l_sce" in parts else 0.0,
        l_dce=parts["l_dce"].item() if "l_dce" in parts else 0.0,
        l_s=parts["l_s"].item() if "l_s" in parts else 0.0,
        l_d=parts["l_d"].item() if "l_d" in parts else 0.0,
        total=value,
        margin_m=margin,
    )


def local_train(model: ClientModel, shard: LabeledDataset, prototypes: PrototypeSet | None,
                cfg: LossConfig, epochs: int, lr: float, batch_size: int, seed) -> tuple[ClientModel, list]:
    """Plain SGD on the weighted local objective; updates ``model`` in place.

    Without prototypes (before the first aggregation) only the
    cross-entropy terms are trained.  Returns the model and one averaged
    :class:`LossBreakdown` per epoch.
    """
    if len(shard) == 0:
        raise ConfigError("cannot train on an empty shard")
    if batch_size < 1 or epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    rng = np.random.default_rng(seed)
    log = []
    n = len(shard)
    for epoch in range(epochs):
        order = rng.permutation(n)
        steps = []
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            try:
                steps.append(_train_step(model, shard.features[idx], shard.labels[idx], prototypes, cfg, lr))
            except DegenerateInputError as exc:
                raise TrainingError(f"client {model.client_id} diverged: {exc}", epoch, step) from exc
        log.append(LossBreakdown.mean(steps))
    return model, log


def compute_local_prototypes(model: ClientModel, shard: LabeledDataset, branch: str = "shared") -> PrototypeSet:
    """Per-class mean of branch features over the shard; unseen classes are absent."""
    if len(shard) == 0:
        raise ConfigError("cannot compute prototypes from an empty shard")
    z = embed(model, shard.features, branch)
    C = model.spec.num_classes
    sums = np.zeros((C, z.shape[1]))
    np.add.at(sums, shard.labels, z)
    counts = np.bincount(shard.labels, minlength=C)
    present = counts > 0
    sums[present] /= counts[present, None]
    return PrototypeSet(sums, present, PrototypeKind.LOCAL)


def assemble_upload(client_id: int, prototypes: PrototypeSet, scores: ImportanceScores, n_k: int) -> ClientUpload:
    if prototypes.coverage != scores.coverage:
        raise ProtocolError(
            f"client {client_id}: prototype coverage {sorted(prototypes.coverage)} "
            f"!= score coverage {sorted(scores.coverage)}")
    if n_k < 1:
        raise ProtocolError(f"client {client_id}: n_k must be >= 1")
    return ClientUpload(int(client_id), prototypes.with_kind(PrototypeKind.LOCAL), scores, int(n_k))


def _distances(z: np.ndarray, prototypes: PrototypeSet, normalize: bool) -> np.ndarray:
    if normalize:
        P = normalized_prototype_matrix(prototypes)
        norms = np.sqrt((z * z).sum(axis=-1, keepdims=True))
        if np.any(norms <= NORM_EPS):
            raise DegenerateInputError("cannot normalize a zero feature")
        z = z / norms
    else:
        prototypes.require(range(prototypes.num_classes))
        P = prototypes.vectors
    diff = z[:, None, :] - P[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def predict_batch(model: ClientModel, features: np.ndarray, prototypes: PrototypeSet,
                  branch: str = "decision", normalize: bool = True) -> np.ndarray:
    """Nearest-prototype labels; ``np.argmin`` breaks ties toward the lower class."""
    z = embed(model, np.atleast_2d(features), branch)
    return np.argmin(_distances(z, prototypes, normalize), axis=1)


def predict(model: ClientModel, x, prototypes: PrototypeSet, branch: str = "decision",
            normalize: bool = True) -> int:
    return int(predict_batch(model, np.asarray(x, dtype=np.float64).reshape(1, -1), prototypes,
                             branch, normalize)[0])


@dataclass
class ClientRuntime:
    """One simulated client: model, data shards and the last prototypes it received."""

    client_id: int
    model: ClientModel
    train: LabeledDataset
    test: LabeledDataset
    prototypes: PrototypeSet | None = None
    history: list = field(default_factory=list)

    @property
    def prototype_branch(self) -> str:
        return "shared" if "shared" in self.model.spec.branches else "decision"

    def run_local(self, cfg: LossConfig, epochs: int, lr: float, batch_size: int, seed,
                  with_scores: bool = True) -> ClientUpload:
        """Train, then extract prototypes and importance scores for upload."""
        _, log = local_train(self.model, self.train, self.prototypes, cfg, epochs, lr, batch_size, seed)
        self.history.append(log)
        branch = self.prototype_branch
        protos = compute_local_prototypes(self.model, self.train, branch)
        if with_scores:
            scores = channel_scores(self.model, self.train, branch)
        else:
            counts = self.train.class_counts()
            scores = ImportanceScores(np.zeros((len(counts), self.model.spec.d_z)), counts)
        return assemble_upload(self.client_id, protos, scores, len(self.train))

    def receive(self, prototypes: PrototypeSet) -> None:
        self.prototypes = prototypes

    def accuracy(self, branch: str | None = None, normalize: bool = True) -> float:
        if self.prototypes is None:
            raise ProtocolError(f"client {self.client_id} has no prototypes for inference")
        branch = branch or ("decision" if "decision" in self.model.spec.branches else "shared")
        pred = predict_batch(self.model, self.test.features, self.prototypes, branch, normalize)
        return float(np.mean(pred == self.test.labels))
