"""Minimal dense tensors with a reverse-mode gradient tape.

Every differentiable operation is a method of :class:`Tape`.  The tape
records ``(output, inputs, backward_rule)`` triples in execution order and
:meth:`Tape.backward` replays them in exact reverse order.  All arithmetic is
float64.

Example::

    tape = Tape()
    x = tape.variable([[1.0, 2.0]])
    w = tape.variable([[3.0], [4.0]])
    y = tape.sum(tape.matmul(x, w))
    tape.backward(y)
    x.grad  # [[3., 4.]]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

NORM_EPS = 1e-12


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    ``data`` is read-only once constructed; only ``grad`` ever changes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        data.setflags(write=False)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape[0] != batch:
        raise DimensionError(f"{idx.shape[0]} labels for a batch of {batch}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        bad = idx[(idx < 0) | (idx >= num_classes)][0]
        raise IndexError(f"label {bad} out of range for {num_classes} classes")
    return idx


class Tape:
    """Records differentiable operations for one backward sweep.

    A tape is confined to a single worker; independent tapes share nothing.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: list[Tensor] = []

    def __len__(self):
        return len(self._ops)

    # ------------------------------------------------------------------
    # construction
    def variable(self, values) -> Tensor:
        """Leaf tensor whose gradient is wanted."""
        t = Tensor(values, requires_grad=True)
        self._tracked.append(t)
        return t

    @staticmethod
    def constant(values) -> Tensor:
        return Tensor(values, requires_grad=False)

    def _record(self, name: str, out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        if not np.all(np.isfinite(out)):
            raise DegenerateInputError(f"non-finite output from {name}")
        needs = any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            self._tracked.append(result)
            self._ops.append((result, tuple(inputs), rule))
        return result

    # ------------------------------------------------------------------
    # backward
    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

        Gradients from repeated calls add up; call :meth:`zero_grad` between
        independent sweeps.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for t in self._tracked:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        if not loss.requires_grad:
            return
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self._ops):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            out.grad = out.grad + g
        # leaves are never op outputs, so their contributions are still pending
        for t in self._tracked:
            g = pending.pop(id(t), None)
            if g is not None:
                t.grad = t.grad + g

    def zero_grad(self) -> None:
        for t in self._tracked:
            t.zero_grad()

    # ------------------------------------------------------------------
    # linear algebra
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        A, B = a.data, b.data
        return self._record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """``x @ weight.T + bias`` with weight stored as [out, in]."""
        if x.data.ndim != 2 or weight.shape[1] != x.shape[1]:
            raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
        X, W = x.data, weight.data
        out = X @ W.T + bias.data

        def rule(g):
            return g @ W, g.T @ X, g.sum(axis=0)

        return self._record("linear", out, (x, weight, bias), rule)

    # ------------------------------------------------------------------
    # elementwise, broadcasting
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        out = self._broadcast("add", a, b, np.add)
        return self._record("add", out, (a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        sa, sb = a.shape, b.shape
        out = self._broadcast("sub", a, b, np.subtract)
        return self._record("sub", out, (a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        A, B = a.data, b.data
        out = self._broadcast("mul", a, b, np.multiply)
        return self._record("mul", out, (a, b),
                            lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        A, B = a.data, b.data
        out = self._broadcast("div", a, b, np.divide)
        return self._record(
            "div", out, (a, b),
            lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)))

    @staticmethod
    def _broadcast(name, a, b, fn):
        try:
            return fn(a.data, b.data)
        except ValueError:
            raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._record("scale", x.data * c, (x,), lambda g: (g * c,))

    def neg(self, x: Tensor) -> Tensor:
        return self.scale(x, -1.0)

    def exp(self, x: Tensor) -> Tensor:
        out = np.exp(x.data)
        return self._record("exp", out, (x,), lambda g: (g * out,))

    def log(self, x: Tensor) -> Tensor:
        if np.any(x.data <= 0):
            raise DegenerateInputError("log of non-positive value")
        X = x.data
        return self._record("log", np.log(X), (x,), lambda g: (g / X,))

    def square(self, x: Tensor) -> Tensor:
        X = x.data
        return self._record("square", X * X, (x,), lambda g: (2.0 * g * X,))

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0
        return self._record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))

    # ------------------------------------------------------------------
    # reductions and indexing
    def sum(self, x: Tensor, axis: int | None = None) -> Tensor:
        shape = x.shape
        if axis is None:
            return self._record("sum", np.asarray(x.data.sum()), (x,),
                                lambda g: (np.broadcast_to(g, shape).copy(),))
        out = x.data.sum(axis=axis)
        return self._record("sum", out, (x,),
                            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))

    def mean(self, x: Tensor, axis: int | None = None) -> Tensor:
        n = x.data.size if axis is None else x.shape[axis]
        return self.scale(self.sum(x, axis), 1.0 / n)

    def pick(self, x: Tensor, labels) -> Tensor:
        """Row-wise gather ``x[i, labels[i]]`` -> [B]."""
        if x.data.ndim != 2:
            raise DimensionError(f"pick expects a matrix, got {x.shape}")
        idx = _as_labels(labels, x.shape[0], x.shape[1])
        rows = np.arange(x.shape[0])
        shape = x.shape

        def rule(g):
            full = np.zeros(shape)
            full[rows, idx] = g
            return (full,)

        return self._record("pick", x.data[rows, idx], (x,), rule)

    # ------------------------------------------------------------------
    # composite kernels with closed-form backward rules
    def log_softmax(self, logits: Tensor) -> Tensor:
        """Row-wise log-softmax along the last axis, max-subtracted."""
        Z = logits.data
        shifted = Z - Z.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        probs = np.exp(out)
        return self._record("log_softmax", out, (logits,),
                            lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))

    def log_softmax_pick(self, logits: Tensor, label) -> Tensor:
        """``log softmax(logits)[label]``.

        A 1-D ``logits`` with an integer label yields a scalar; a [B, C]
        matrix with B labels yields a length-B vector.
        """
        if logits.data.ndim == 1:
            C = logits.shape[0]
            if not 0 <= int(label) < C:
                raise IndexError(f"label {label} out of range for {C} classes")
            row = self.reshape(logits, (1, C))
            return self.reshape(self.pick(self.log_softmax(row), [int(label)]), ())
        return self.pick(self.log_softmax(logits), label)

    def reshape(self, x: Tensor, shape) -> Tensor:
        old = x.shape
        try:
            out = x.data.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {old} to {shape}") from None
        return self._record("reshape", out, (x,), lambda g: (g.reshape(old),))

    def l2_normalize(self, v: Tensor) -> Tensor:
        """``v / ||v||`` along the last axis; rows are normalized independently."""
        V = v.data
        norm = np.sqrt((V * V).sum(axis=-1, keepdims=True))
        if np.any(norm <= NORM_EPS):
            raise DegenerateInputError(f"cannot normalize a vector with norm <= {NORM_EPS:g}")
        u = V / norm

        def rule(g):
            return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norm,)

        return self._record("l2_normalize", u, (v,), rule)

    def euclidean_distance(self, a: Tensor, b: Tensor) -> Tensor:
        """``||a - b||`` along the last axis (scalar for vectors)."""
        if a.shape != b.shape:
            raise DimensionError(f"euclidean_distance: {a.shape} vs {b.shape}")
        diff = a.data - b.data
        dist = np.sqrt((diff * diff).sum(axis=-1))

        def rule(g):
            # subgradient 0 where the two points coincide
            safe = np.where(dist > 0, dist, 1.0)
            unit = np.where(np.expand_dims(dist > 0, -1), diff / np.expand_dims(safe, -1), 0.0)
            ga = np.expand_dims(g, -1) * unit
            return ga, -ga

        return self._record("euclidean_distance", dist, (a, b), rule)

    def pairwise_distance(self, x: Tensor, centers: Tensor) -> Tensor:
        """Distances between every row of ``x`` [B, d] and of ``centers`` [C, d] -> [B, C]."""
        if x.data.ndim != 2 or centers.data.ndim != 2 or x.shape[1] != centers.shape[1]:
            raise DimensionError(f"pairwise_distance: {x.shape} vs {centers.shape}")
        diff = x.data[:, None, :] - centers.data[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))

        def rule(g):
            safe = np.where(dist > 0, dist, 1.0)
            w = np.where(dist > 0, g / safe, 0.0)[:, :, None] * diff
            return w.sum(axis=1), -w.sum(axis=0)

        return self._record("pairwise_distance", dist, (x, centers), rule)
