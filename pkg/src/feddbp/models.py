"""Heterogeneous per-client MLPs with a dual-branch projector.

Each client owns an extractor (affine + ReLU stack of client-specific
widths), a shared branch and a decision branch (one affine map each onto
``d_z`` channels) and a classifier head on ``d_z`` features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tape, Tensor

# Eight extractor shapes cycled over clients (client k gets entry k mod 8).
DEFAULT_ARCHITECTURES = (
    (32,),
    (64,),
    (32, 32),
    (64, 32),
    (48,),
    (64, 64),
    (32, 32, 32),
    (96, 48),
)

_BRANCHES = ("shared", "decision")


@dataclass(frozen=True)
class ArchitectureSpec:
    widths: tuple
    input_dim: int
    d_z: int
    num_classes: int
    activation: str = "relu"
    separate_heads: bool = False
    branches: tuple = _BRANCHES

    def __post_init__(self):
        widths = tuple(tuple(int(w) for w in ws) for ws in self.widths)
        object.__setattr__(self, "widths", widths)
        if not widths:
            raise ConfigError("architecture needs at least one width list")
        for ws in widths:
            if not ws or min(ws) < 1:
                raise ConfigError(f"invalid extractor widths {list(ws)}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.d_z < 1 or self.num_classes < 1 or self.input_dim < 1:
            raise ConfigError("input_dim, d_z and num_classes must be >= 1")
        if not self.branches or not set(self.branches) <= set(_BRANCHES):
            raise ConfigError(f"branches must be a non-empty subset of {_BRANCHES}")

    @classmethod
    def cycled(cls, num_clients: int, input_dim: int, d_z: int, num_classes: int,
               architectures=DEFAULT_ARCHITECTURES, **kw) -> "ArchitectureSpec":
        widths = tuple(architectures[k % len(architectures)] for k in range(num_clients))
        return cls(widths, input_dim, d_z, num_classes, **kw)


class DualOutput(NamedTuple):
    z_s: Tensor | None
    z_d: Tensor | None
    logits_s: Tensor | None
    logits_d: Tensor | None


@dataclass(eq=False)
class ClientModel:
    """Parameter arrays keyed by name; ``weight`` is stored as [out, in]."""

    spec: ArchitectureSpec
    client_id: int
    params: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.spec.widths[self.client_id])

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ClientModel":
        return ClientModel(self.spec, self.client_id, {k: v.copy() for k, v in self.params.items()})

    def head_name(self, branch: str) -> str:
        if self.spec.separate_heads and branch == "decision":
            return "head_d"
        return "head"

    def bind(self, tape: Tape) -> dict:
        """Wrap every parameter as a tape variable."""
        return {k: tape.variable(v) for k, v in self.params.items()}


def _init_affine(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


def build_client_model(spec: ArchitectureSpec, client_id: int, seed: int) -> ClientModel:
    """Deterministic uniform(+-1/sqrt(fan_in)) init, seeded per (seed, client, layer)."""
    if not 0 <= client_id < len(spec.widths):
        raise ConfigError(f"client_id {client_id} outside {len(spec.widths)} architectures")
    widths = spec.widths[client_id]
    params = {}

    def layer(name, slot, fan_in, fan_out):
        rng = np.random.default_rng([int(seed), int(client_id), slot])
        params[f"{name}.weight"], params[f"{name}.bias"] = _init_affine(rng, fan_in, fan_out)

    fan_in = spec.input_dim
    for i, w in enumerate(widths):
        layer(f"extractor.{i}", i, fan_in, w)
        fan_in = w
    hidden = fan_in
    slot = 1000
    for branch in spec.branches:
        layer(branch, slot + _BRANCHES.index(branch), hidden, spec.d_z)
    layer("head", slot + 10, spec.d_z, spec.num_classes)
    if spec.separate_heads:
        layer("head_d", slot + 11, spec.d_z, spec.num_classes)
    return ClientModel(spec, client_id, params)


def _affine(tape, bound, name, x):
    return tape.linear(x, bound[f"{name}.weight"], bound[f"{name}.bias"])


def extract(model: ClientModel, bound: dict, batch: Tensor, tape: Tape) -> Tensor:
    if batch.data.ndim != 2 or batch.shape[1] != model.spec.input_dim:
        raise DimensionError(f"batch shape {batch.shape} does not match input_dim {model.spec.input_dim}")
    h = batch
    for i in range(model.num_layers):
        h = tape.relu(_affine(tape, bound, f"extractor.{i}", h))
    return h


def forward_dual(model: ClientModel, batch, tape: Tape, bound: dict | None = None) -> DualOutput:
    """Run both branches and the classifier on ``batch`` [B, d_in].

    ``bound`` lets a caller reuse tape variables created by
    :meth:`ClientModel.bind` (needed to read parameter gradients).  A missing
    branch yields ``None`` entries.
    """
    if bound is None:
        bound = {k: Tape.constant(v) for k, v in model.params.items()}
    if not isinstance(batch, Tensor):
        batch = Tape.constant(batch)
    h = extract(model, bound, batch, tape)
    out = {}
    for branch, key in (("shared", "s"), ("decision", "d")):
        if branch in model.spec.branches:
            z = _affine(tape, bound, branch, h)
            out[f"z_{key}"] = z
            out[f"logits_{key}"] = _affine(tape, bound, model.head_name(branch), z)
        else:
            out[f"z_{key}"] = out[f"logits_{key}"] = None
    return DualOutput(**out)


def embed(model: ClientModel, features: np.ndarray, branch: str = "shared") -> np.ndarray:
    """Branch features for ``features`` without recording gradients."""
    out = forward_dual(model, features, Tape())
    z = out.z_s if branch == "shared" else out.z_d
    if z is None:
        raise ConfigError(f"model has no {branch} branch")
    return np.array(z.data)
