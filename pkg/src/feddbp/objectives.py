"""Local training objectives: cross-entropy, prototype L2 alignment and the
prototype contrastive loss with margin-based boundary penalty.

All losses take the caller's :class:`~feddbp.tensor.Tape` and return scalar
tensors recorded on it.  Prototypes always enter as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .prototypes import PrototypeSet
from .tensor import NORM_EPS, Tape, Tensor

L_D_FORMS = ("as_written", "log_form")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    hard_mining: bool = True
    l_d_form: str = "as_written"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.l_d_form not in L_D_FORMS:
            raise ConfigError(f"l_d_form must be one of {L_D_FORMS}, got {self.l_d_form!r}")


@dataclass(frozen=True)
class LossBreakdown:
    l_sce: float = 0.0
    l_dce: float = 0.0
    l_s: float = 0.0
    l_d: float = 0.0
    total: float = 0.0
    margin_m: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, items) -> "LossBreakdown":
        items = list(items)
        if not items:
            return cls()
        return cls(**{k: float(np.mean([getattr(b, k) for b in items])) for k in cls.__dataclass_fields__})


def _labels(labels, batch):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise DimensionError(f"{y.shape[0]} labels for batch of {batch}")
    return y


def cross_entropy(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    return tape.neg(tape.mean(tape.log_softmax_pick(logits, labels)))


def l2_alignment_loss(tape: Tape, z_s: Tensor, labels, prototypes: PrototypeSet) -> Tensor:
    """Mean squared distance from each shared feature to its class prototype."""
    y = _labels(labels, z_s.shape[0])
    prototypes.require(np.unique(y))
    if prototypes.d_z != z_s.shape[1]:
        raise DimensionError(f"features have {z_s.shape[1]} channels, prototypes {prototypes.d_z}")
    target = Tape.constant(prototypes.vectors[y])
    sq = tape.sum(tape.square(tape.sub(z_s, target)), axis=1)
    return tape.mean(sq)


def adaptive_margin(distances, labels) -> float:
    """Midpoint of the batch's mean positive and mean negative distance.

    Returned as a plain float; the boundary carries no gradient.
    """
    d = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionError(f"distance matrix must be 2-D, got {d.shape}")
    B, C = d.shape
    if C < 2:
        raise ConfigError("adaptive margin needs at least two classes")
    if B < 1:
        raise ConfigError("adaptive margin needs a non-empty batch")
    y = _labels(labels, B)
    pos = np.zeros((B, C), dtype=bool)
    pos[np.arange(B), y] = True
    return float((d[pos].mean() + d[~pos].mean()) / 2.0)


def boundary_penalty(tape: Tape, distances: Tensor, labels, m: float, tau: float) -> Tensor:
    """``sum_{c != y} exp(-max(0, m - d_c) / tau)`` per row.

    A 1-D distance row with a single label gives a scalar; a [B, C] matrix
    gives a length-B vector.
    """
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    row = distances.data.ndim == 1
    if row:
        distances = tape.reshape(distances, (1, distances.shape[0]))
    B, C = distances.shape
    y = _labels(labels, B)
    negatives = np.ones((B, C))
    negatives[np.arange(B), y] = 0.0
    gap = tape.relu(tape.sub(Tape.constant(float(m)), distances))
    terms = tape.mul(tape.exp(tape.scale(gap, -1.0 / tau)), Tape.constant(negatives))
    out = tape.sum(terms, axis=1)
    return tape.reshape(out, ()) if row else out


def normalized_prototype_matrix(prototypes: PrototypeSet) -> np.ndarray:
    prototypes.require(range(prototypes.num_classes))
    P = prototypes.vectors
    norms = np.sqrt((P * P).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DegenerateInputError("cannot normalize a zero prototype")
    return P / norms


def decision_distances(tape: Tape, z_d: Tensor, prototypes: PrototypeSet) -> Tensor:
    """[B, C] distances between normalized features and normalized prototypes."""
    phat = normalized_prototype_matrix(prototypes)
    if phat.shape[1] != z_d.shape[1]:
        raise DimensionError(f"features have {z_d.shape[1]} channels, prototypes {phat.shape[1]}")
    return tape.pairwise_distance(tape.l2_normalize(z_d), Tape.constant(phat))


def decision_loss_from_distances(tape: Tape, distances: Tensor, labels, tau: float,
                                 penalty: Tensor | None = None, form: str = "as_written") -> Tensor:
    """Negative batch mean of ``exp(-d_y/tau) / (sum_c exp(-d_c/tau) + penalty)``.

    ``penalty=None`` drops the extra denominator term.  ``form='log_form'``
    averages the log of the ratio instead of the ratio itself.
    """
    y = _labels(labels, distances.shape[0])
    e = tape.exp(tape.scale(distances, -1.0 / tau))
    denom = tape.sum(e, axis=1)
    if penalty is not None:
        denom = tape.add(denom, penalty)
    ratio = tape.div(tape.pick(e, y), denom)
    if form == "log_form":
        ratio = tape.log(ratio)
    elif form != "as_written":
        raise ConfigError(f"unknown l_d_form {form!r}")
    return tape.neg(tape.mean(ratio))


def contrastive_decision_loss(tape: Tape, z_d: Tensor, labels, prototypes: PrototypeSet,
                              cfg: LossConfig, margin: float | None = None) -> tuple[Tensor, float]:
    """Prototype contrastive loss on the decision branch.

    Returns ``(loss, m)``.  With ``cfg.hard_mining`` the boundary penalty is
    added using the batch-adaptive margin ``m`` (or the supplied ``margin``).
    """
    y = _labels(labels, z_d.shape[0])
    d = decision_distances(tape, z_d, prototypes)
    m = adaptive_margin(d, y) if margin is None else float(margin)
    penalty = boundary_penalty(tape, d, y, m, cfg.tau) if cfg.hard_mining else None
    return decision_loss_from_distances(tape, d, y, cfg.tau, penalty, cfg.l_d_form), m


def total_loss(tape: Tape, parts: dict, cfg: LossConfig) -> Tensor:
    """``l_sce + lambda1*l_dce + lambda2*l_s + lambda3*l_d``; missing parts are skipped."""
    weights = {"l_sce": 1.0, "l_dce": cfg.lambda1, "l_s": cfg.lambda2, "l_d": cfg.lambda3}
    total = None
    for name, w in weights.items():
        term = parts.get(name)
        if term is None:
            continue
        term = term if w == 1.0 else tape.scale(term, w)
        total = term if total is None else tape.add(total, term)
    if total is None:
        raise ConfigError("total_loss needs at least one loss term")
    return total
