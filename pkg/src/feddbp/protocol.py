"""Server-side aggregation, Top-K personalized fusion and round orchestration."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .client import ClientRuntime, ClientUpload
from .errors import ConfigError, ProtocolError
from .objectives import LossConfig
from .prototypes import ImportanceScores, PrototypeKind, PrototypeSet

logger = logging.getLogger(__name__)


def average_global_prototypes(uploads) -> PrototypeSet:
    """Unweighted per-class mean over the clients that hold each class."""
    uploads = list(uploads)
    if not uploads:
        raise ProtocolError("cannot aggregate an empty upload list")
    shape = uploads[0].prototypes.vectors.shape
    sums = np.zeros(shape)
    holders = np.zeros(shape[0], dtype=np.int64)
    # fixed accumulation order keeps the result independent of arrival order
    for up in sorted(uploads, key=lambda u: u.client_id):
        p = up.prototypes
        if p.vectors.shape != shape:
            raise ProtocolError(f"client {up.client_id} sent prototypes {p.vectors.shape}, expected {shape}")
        sums[p.present] += p.vectors[p.present]
        holders += p.present
    present = holders > 0
    sums[present] /= holders[present, None]
    return PrototypeSet(sums, present, PrototypeKind.GLOBAL)


def topk_channels(scores_row, k_top: int) -> frozenset:
    """Indices of the ``k_top`` largest scores; equal scores favour the lower index."""
    s = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    if not 1 <= k_top <= s.size:
        raise ConfigError(f"K_top={k_top} outside [1, {s.size}]")
    order = np.lexsort((np.arange(s.size), -s))
    return frozenset(int(j) for j in order[:k_top])


def fuse_personalized_prototype(local: PrototypeSet, global_p: PrototypeSet, scores: ImportanceScores,
                                eta: float, k_top: int) -> PrototypeSet:
    """Blend local into global prototypes on each class's top-scoring channels.

    Channels in the class's Top-K take ``eta*local + (1-eta)*global``; all
    other channels, and classes the client never saw, keep the global value.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta={eta} outside [0, 1]")
    if not local.coverage <= global_p.coverage:
        raise ProtocolError(f"local classes {sorted(local.coverage - global_p.coverage)} have no global prototype")
    if not local.coverage <= scores.coverage:
        raise ProtocolError(f"no importance scores for classes {sorted(local.coverage - scores.coverage)}")
    out = np.array(global_p.vectors)
    for c in sorted(local.coverage):
        chans = np.fromiter(sorted(topk_channels(scores.scores[c], k_top)), dtype=np.int64)
        out[c, chans] = eta * local.vectors[c, chans] + (1.0 - eta) * global_p.vectors[c, chans]
    return PrototypeSet(out, global_p.present, PrototypeKind.PERSONALIZED)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    participation: float = 1.0


@dataclass
class ServerState:
    eta: float = 1.0
    k_top: int = 30
    personalize: bool = True
    round_index: int = 0
    global_prototypes: PrototypeSet | None = None
    uploads: dict = field(default_factory=dict)
    empty_rounds: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta={self.eta} outside [0, 1]")
        if self.k_top < 1:
            raise ConfigError(f"K_top={self.k_top} must be >= 1")

    def downloads_for(self, uploads) -> dict:
        """Prototype set each uploading client should receive."""
        out = {}
        for up in uploads:
            if self.personalize:
                out[up.client_id] = fuse_personalized_prototype(
                    up.prototypes, self.global_prototypes, up.scores, self.eta, self.k_top)
            else:
                out[up.client_id] = self.global_prototypes
        return out


def select_clients(num_clients: int, participation: float, seed: int, round_index: int) -> list:
    """Independent Bernoulli(participation) draw per client."""
    if not 0.0 <= participation <= 1.0:
        raise ConfigError(f"participation rate {participation} outside [0, 1]")
    if participation == 1.0:
        return list(range(num_clients))
    draw = np.random.default_rng([int(seed), int(round_index), 0x5E1EC7]).random(num_clients)
    return [k for k in range(num_clients) if draw[k] < participation]


def run_round(state: ServerState, clients: list, loss_cfg: LossConfig, train_cfg: TrainingConfig,
              seed: int, workers: int = 1) -> tuple[ServerState, dict]:
    """Run one communication round in place and return ``(state, downloads)``.

    Every upload and download passes through the binary codec.
    """
    t = state.round_index
    chosen = [clients[k] for k in select_clients(len(clients), train_cfg.participation, seed, t)]
    if not chosen:
        logger.info("round %d: no clients selected", t)
        state.empty_rounds.append(t)
        state.round_index += 1
        return state, {}

    def local(client: ClientRuntime) -> bytes:
        up = client.run_local(loss_cfg, train_cfg.epochs, train_cfg.lr, train_cfg.batch_size,
                              [int(seed), t, client.client_id], with_scores=state.personalize)
        return codec.encode(codec.RoundMessage(codec.Direction.UPLOAD, t, up))

    if workers > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            wire = list(pool.map(local, chosen))
    else:
        wire = [local(c) for c in chosen]

    # barrier: nothing below runs until every selected client has uploaded
    uploads: list[ClientUpload] = []
    for blob in wire:
        msg = codec.decode(blob)
        if msg.direction != codec.Direction.UPLOAD or msg.round_index != t:
            raise ProtocolError(f"unexpected message {msg.direction.name} for round {msg.round_index}")
        uploads.append(msg.payload)
    state.uploads = {u.client_id: u for u in uploads}
    state.global_prototypes = average_global_prototypes(uploads)

    downloads = {}
    by_id = {c.client_id: c for c in chosen}
    for cid, protos in state.downloads_for(uploads).items():
        blob = codec.encode(codec.RoundMessage(codec.Direction.DOWNLOAD, t, codec.Download(cid, protos)))
        msg = codec.decode(blob)
        by_id[msg.payload.client_id].receive(msg.payload.prototypes)
        downloads[cid] = msg.payload.prototypes
    state.round_index += 1
    return state, downloads
