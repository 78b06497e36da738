"""Empirical Fisher importance of each shared-feature channel, per class."""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DimensionError
from .models import ClientModel, embed
from .prototypes import ImportanceScores
from .tensor import Tape


def feature_log_prob_grads(model: ClientModel, features: np.ndarray, labels, branch: str = "shared") -> np.ndarray:
    """Per-sample gradient of ``log p(y_i | x_i)`` w.r.t. the branch feature z_i.

    Sample i's log-probability depends only on its own row of z, so a single
    backward pass from the summed log-probabilities yields every row at once.
    """
    z = embed(model, features, branch)
    tape = Tape()
    zt = tape.variable(z)
    head = model.head_name(branch)
    logits = tape.linear(zt, Tape.constant(model.params[f"{head}.weight"]),
                         Tape.constant(model.params[f"{head}.bias"]))
    tape.backward(tape.sum(tape.log_softmax_pick(logits, labels)))
    return np.array(zt.grad)


def channel_scores(model: ClientModel, data: LabeledDataset, branch: str = "shared",
                   batch_size: int = 256) -> ImportanceScores:
    """Mean squared log-probability gradient per (class, channel)."""
    if len(data) == 0:
        raise ConfigError("channel_scores needs a non-empty dataset")
    if data.input_dim != model.spec.input_dim:
        raise DimensionError(f"data has {data.input_dim} features, model expects {model.spec.input_dim}")
    C, d_z = model.spec.num_classes, model.spec.d_z
    sums = np.zeros((C, d_z))
    counts = np.zeros(C, dtype=np.int64)
    for start in range(0, len(data), batch_size):
        x = data.features[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        g = feature_log_prob_grads(model, x, y, branch)
        np.add.at(sums, y, g * g)
        counts += np.bincount(y, minlength=C)
    scores = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return ImportanceScores(scores, counts)
