"""Experiment harness: variants, metrics, sweeps and CSV/manifest output."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import __version__
from .client import ClientRuntime, predict_batch
from .config import RunConfig
from .data import LabeledDataset, dirichlet_partition, generate_synthetic, ingest_csv, train_test_split
from .errors import ConfigError, ProtocolError
from .models import ArchitectureSpec, build_client_model
from .objectives import LossBreakdown, LossConfig
from .protocol import ServerState, TrainingConfig, run_round

logger = logging.getLogger(__name__)

LOSS_FIELDS = ("l_sce", "l_dce", "l_s", "l_d", "total", "margin_m")


class VariantSpec(Enum):
    FULL = "full"
    NO_SHARE = "no_share"
    NO_DECISION = "no_decision"
    NO_HARD = "no_hard"
    NO_PERSONALIZATION = "no_personalization"
    L2_ONLY_BASELINE = "l2_only_baseline"

    @property
    def branches(self) -> tuple:
        if self is VariantSpec.NO_SHARE:
            return ("decision",)
        if self in (VariantSpec.NO_DECISION, VariantSpec.L2_ONLY_BASELINE):
            return ("shared",)
        return ("shared", "decision")

    @property
    def personalize(self) -> bool:
        return self not in (VariantSpec.NO_PERSONALIZATION, VariantSpec.L2_ONLY_BASELINE)

    @property
    def inference_branch(self) -> str:
        return "decision" if "decision" in self.branches else "shared"

    def loss_config(self, cfg: RunConfig) -> LossConfig:
        lc = LossConfig(**vars(cfg.loss))
        if self is VariantSpec.NO_HARD:
            lc = replace(lc, hard_mining=False)
        return lc

    def normalized_inference(self, cfg: RunConfig) -> bool:
        # nearest raw prototype, as in the reference L2-alignment method
        if self is VariantSpec.L2_ONLY_BASELINE:
            return False
        return cfg.normalized_inference


def weighted_objective(per_client) -> float:
    """Sample-weighted mean ``sum_k n_k/N * F_k`` over ``(n_k, F_k)`` pairs."""
    pairs = [(int(n), float(f)) for n, f in per_client]
    if not pairs:
        raise ConfigError("weighted_objective needs at least one client")
    if any(n < 1 for n, _ in pairs):
        raise ConfigError("client sample counts must be >= 1")
    N = sum(n for n, _ in pairs)
    return float(sum(n / N * f for n, f in pairs))


def evaluate_client(model, test: LabeledDataset, prototypes, branch: str = "decision",
                    normalize: bool = True) -> float:
    """Fraction of test samples whose nearest prototype has the true label."""
    if len(test) == 0:
        raise ConfigError("empty test shard")
    pred = predict_batch(model, test.features, prototypes, branch, normalize)
    return float(np.mean(pred == test.labels))


@dataclass
class RunMetrics:
    variant: str
    seed: int
    client_rows: list = field(default_factory=list)
    round_rows: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    @property
    def average_accuracy(self) -> list:
        return [r["avg_accuracy"] for r in self.round_rows]

    @property
    def final_accuracy(self) -> float:
        return self.round_rows[-1]["avg_accuracy"]


def load_dataset(cfg: RunConfig, seed: int) -> LabeledDataset:
    d = cfg.dataset
    if d.source == "csv":
        col = d.label_column
        if isinstance(col, str) and col.lstrip("-").isdigit():
            col = int(col)
        if col is None or (isinstance(col, int) and col < 0):
            col = _column_count(d.csv_path) + (-1 if col is None else col)
        return ingest_csv(d.csv_path, col)
    return generate_synthetic(d.num_classes, d.per_class, d.input_dim, d.class_separation,
                              d.seed if d.seed is not None else seed)


def _column_count(path) -> int:
    try:
        with open(path, newline="") as fh:
            return len(next(csv.reader(fh), []))
    except FileNotFoundError:
        return 0


def build_clients(cfg: RunConfig, variant: VariantSpec, seed: int) -> list:
    """Partition the data and give every client its model and train/test shards."""
    data = load_dataset(cfg, seed)
    p = cfg.partition
    part_seed = p.seed if p.seed is not None else seed
    plan = dirichlet_partition(data, p.num_clients, p.alpha, part_seed)
    spec = ArchitectureSpec.cycled(p.num_clients, data.input_dim, cfg.model.d_z, data.num_classes,
                                   cfg.model.architectures, separate_heads=cfg.model.separate_heads,
                                   branches=variant.branches)
    clients = []
    for k, idx in enumerate(plan.client_indices):
        train_idx, test_idx = train_test_split(idx, part_seed, k, p.test_fraction)
        model = build_client_model(spec, k, seed)
        clients.append(ClientRuntime(k, model, data.subset(train_idx), data.subset(test_idx)))
    return clients


def run_single(cfg: RunConfig, variant, seed: int) -> RunMetrics:
    """One federated run; a pure function of ``(cfg, variant, seed)`` apart from timings."""
    variant = VariantSpec(variant)
    clients = build_clients(cfg, variant, seed)
    state = ServerState(eta=cfg.fusion.eta, k_top=cfg.fusion.k_top, personalize=variant.personalize)
    loss_cfg = variant.loss_config(cfg)
    t = cfg.training
    train_cfg = TrainingConfig(t.epochs, t.batch_size, t.lr, t.participation)
    normalize = variant.normalized_inference(cfg)
    metrics = RunMetrics(variant.value, int(seed))

    for r in range(t.rounds):
        start = time.perf_counter()
        state, downloads = run_round(state, clients, loss_cfg, train_cfg, seed, workers=cfg.workers)
        accs, losses, objective_terms = [], [], []
        for c in clients:
            if c.prototypes is None:
                continue
            try:
                acc = evaluate_client(c.model, c.test, c.prototypes, variant.inference_branch, normalize)
            except ProtocolError:
                # a class nobody uploaded leaves the prototype table incomplete
                acc = float("nan")
            trained = c.client_id in downloads
            last = c.history[-1][-1] if trained and c.history and c.history[-1] else LossBreakdown()
            row = {"round": r, "client": c.client_id, "accuracy": acc,
                   "n_train": len(c.train), "n_test": len(c.test), "participated": int(trained)}
            row.update(last.as_dict())
            metrics.client_rows.append(row)
            if np.isfinite(acc):
                accs.append(acc)
            if trained and c.history[-1]:
                losses.append(last)
                objective_terms.append((len(c.train), last.total))
        mean_loss = LossBreakdown.mean(losses)
        round_row = {"round": r, "avg_accuracy": float(np.mean(accs)) if accs else float("nan"),
                     "clients_evaluated": len(accs), "participants": len(downloads),
                     "weighted_objective": weighted_objective(objective_terms) if objective_terms else float("nan")}
        round_row.update({k: getattr(mean_loss, k) for k in LOSS_FIELDS})
        metrics.round_rows.append(round_row)
        metrics.wall_clock.append(time.perf_counter() - start)
        logger.info("%s seed=%d round %d/%d avg_acc=%.4f", variant.value, seed, r + 1, t.rounds,
                    round_row["avg_accuracy"])
    return metrics


# ----------------------------------------------------------------------
# output

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


CLIENT_COLUMNS = ("round", "client", "accuracy", "n_train", "n_test", "participated") + LOSS_FIELDS
ROUND_COLUMNS = ("round", "avg_accuracy", "clients_evaluated", "participants", "weighted_objective") + LOSS_FIELDS


def write_run(metrics: RunMetrics, cfg: RunConfig, out_dir) -> dict:
    """Write metrics.csv, rounds.csv, timing.csv and manifest.json under ``out_dir``.

    Wall-clock timings live only in timing.csv so the metric files of two
    replays compare byte for byte.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name)
             for name in ("metrics.csv", "rounds.csv", "timing.csv", "manifest.json")}
    _write_csv(paths["metrics.csv"], metrics.client_rows, CLIENT_COLUMNS)
    _write_csv(paths["rounds.csv"], metrics.round_rows, ROUND_COLUMNS)
    _write_csv(paths["timing.csv"], [{"round": i, "seconds": s} for i, s in enumerate(metrics.wall_clock)],
               ("round", "seconds"))
    manifest = {
        "package_version": __version__,
        "variant": metrics.variant,
        "seed": metrics.seed,
        "config_sha256": cfg.content_hash(),
        "config": cfg.to_dict(),
    }
    with open(paths["manifest.json"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


@dataclass
class ExperimentResult:
    variant: str
    runs: list
    mean: float
    std: float

    def summary_row(self, **extra) -> dict:
        finals = [m.final_accuracy for m in self.runs]
        row = dict(extra)
        row.update({"variant": self.variant, "seeds": len(finals), "mean_final_accuracy": self.mean,
                    "std_final_accuracy": self.std, "min_final_accuracy": float(np.min(finals)),
                    "max_final_accuracy": float(np.max(finals))})
        return row


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _run_job(args):
    cfg, variant, seed = args
    return run_single(cfg, variant, seed)


def run_experiment(cfg: RunConfig, variant=None, seeds=None, out_dir=None) -> ExperimentResult:
    """Run every seed of one variant and summarize final average accuracy."""
    variant = VariantSpec(variant or cfg.variant)
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg, variant.value, s) for s in seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        # inner client loops stay serial when seeds fan out over processes
        inner = replace(cfg, workers=1)
        jobs = [(inner, v, s) for _, v, s in jobs]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    mean, std = summarize(m.final_accuracy for m in runs)
    result = ExperimentResult(variant.value, runs, mean, std)
    if out_dir is not None:
        for m in runs:
            write_run(m, cfg, os.path.join(out_dir, variant.value, f"seed_{m.seed}"))
        write_summary(os.path.join(out_dir, variant.value, "summary.csv"), [result.summary_row()])
    return result


SUMMARY_COLUMNS = ("variant", "seeds", "mean_final_accuracy", "std_final_accuracy",
                   "min_final_accuracy", "max_final_accuracy")


def write_summary(path, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    columns = [k for k in rows[0] if k not in SUMMARY_COLUMNS] + list(SUMMARY_COLUMNS)
    _write_csv(path, rows, columns)


def sweep_alpha(cfg: RunConfig, alphas=None, out_dir=None) -> list:
    rows = []
    for a in (alphas if alphas is not None else cfg.sweep.alphas):
        sub = cfg.replace(**{"partition.alpha": float(a)})
        res = run_experiment(sub, out_dir=None if out_dir is None else os.path.join(out_dir, f"alpha_{a}"))
        rows.append(res.summary_row(alpha=float(a)))
    if out_dir is not None:
        write_summary(os.path.join(out_dir, "sweep_alpha.csv"), rows)
    return rows


def sweep_epochs(cfg: RunConfig, epochs=None, out_dir=None) -> list:
    rows = []
    for e in (epochs if epochs is not None else cfg.sweep.epochs):
        sub = cfg.replace(**{"training.epochs": int(e)})
        res = run_experiment(sub, out_dir=None if out_dir is None else os.path.join(out_dir, f"epochs_{e}"))
        rows.append(res.summary_row(epochs=int(e)))
    if out_dir is not None:
        write_summary(os.path.join(out_dir, "sweep_epochs.csv"), rows)
    return rows


def ablate(cfg: RunConfig, out_dir=None, variants=None) -> list:
    """One summary row per variant."""
    results = []
    for v in (variants or list(VariantSpec)):
        results.append(run_experiment(cfg, v, out_dir=out_dir))
    if out_dir is not None:
        write_summary(os.path.join(out_dir, "ablation.csv"), [r.summary_row() for r in results])
    return results
