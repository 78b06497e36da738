"""Run configuration: nested blocks, defaults, profiles, validation.

Omitted keys take the reference hyperparameters (20 clients, full
participation, SGD lr 0.01, 10 local epochs, batch 32, 100 rounds,
d_z 512, tau 0.07, lambdas 1/10/1, eta 1, K_top 30, Dir(0.1)).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .models import DEFAULT_ARCHITECTURES

VARIANTS = ("full", "no_share", "no_decision", "no_hard", "no_personalization", "l2_only_baseline")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    num_classes: int = 10
    per_class: int = 200
    input_dim: int = 32
    class_separation: float = 2.5
    seed: int | None = None
    csv_path: str | None = None
    label_column: str | int | None = None


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 20
    alpha: float = 0.1
    seed: int | None = None
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 512
    architectures: tuple = DEFAULT_ARCHITECTURES
    separate_heads: bool = False


@dataclass(frozen=True)
class TrainingBlock:
    rounds: int = 100
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    participation: float = 1.0


@dataclass(frozen=True)
class LossBlock:
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    hard_mining: bool = True
    l_d_form: str = "as_written"


@dataclass(frozen=True)
class FusionConfig:
    eta: float = 1.0
    k_top: int = 30


@dataclass(frozen=True)
class SweepConfig:
    alphas: tuple = (0.1, 0.5, 1.0, 10.0)
    epochs: tuple = (1, 10, 20)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    loss: LossBlock = field(default_factory=LossBlock)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    variant: str = "full"
    normalized_inference: bool = True
    seeds: tuple = (0,)
    output_dir: str = "runs"
    workers: int = field(default_factory=lambda: len(os.sched_getaffinity(0))
                         if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def content_hash(self) -> str:
        """Digest of every key that can change results (not output_dir or workers)."""
        tree = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "workers")}
        blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"partition.alpha": 1.0})``."""
        return parse_config(_merge(self.to_dict(), _expand(dotted)))


# the `desk` profile shrinks clients, feature width and rounds for workstation runs
PROFILES = {
    "reference": {},
    "desk": {
        "partition": {"num_clients": 8},
        "model": {"d_z": 32},
        "training": {"rounds": 30},
        "dataset": {"num_classes": 10, "per_class": 200},
    },
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _expand(dotted: dict) -> dict:
    tree: dict = {}
    for key, value in dotted.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(path: str, value, default):
    """Convert ``value`` to the type of ``default`` (strings come from CLI flags)."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)) and value in (0, 1):
                return bool(value)
            raise ValueError(value)
        if isinstance(value, str) and not isinstance(default, str) and default is not None:
            value = yaml.safe_load(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            if not isinstance(value, (list, tuple)):
                value = [value]
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        return value
    except (TypeError, ValueError, yaml.YAMLError):
        raise ConfigError(f"{path}: cannot interpret {value!r}") from None


def _build(cls, raw, prefix: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")
    kwargs = {}
    defaults = cls()
    for name, f in fields.items():
        path = prefix + name
        if name not in raw:
            continue
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), raw[name], path + ".")
        elif raw[name] is None or default is None:
            v = raw[name]
            if default is None and isinstance(v, str) and name == "seed":
                v = _coerce(path, v, 0)
            kwargs[name] = v
        else:
            kwargs[name] = _coerce(path, raw[name], default)
    return cls(**kwargs)


def validate(cfg: RunConfig) -> RunConfig:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    d, p, m, t, l, f = cfg.dataset, cfg.partition, cfg.model, cfg.training, cfg.loss, cfg.fusion
    need(d.source in ("synthetic", "csv"), "dataset.source", "must be 'synthetic' or 'csv'")
    if d.source == "csv":
        need(bool(d.csv_path), "dataset.csv_path", "required when source is 'csv'")
    else:
        need(d.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        need(d.per_class >= 1, "dataset.per_class", "must be >= 1")
        need(d.input_dim >= 1, "dataset.input_dim", "must be >= 1")
        need(d.class_separation > 0, "dataset.class_separation", "must be > 0")
        need(d.num_classes <= 2 * d.input_dim, "dataset.num_classes", "must be <= 2 * input_dim")
    need(p.num_clients >= 2, "partition.num_clients", "must be >= 2")
    need(p.alpha > 0, "partition.alpha", "must be > 0")
    need(0 < p.test_fraction < 1, "partition.test_fraction", "must be in (0, 1)")
    need(m.d_z >= 1, "model.d_z", "must be >= 1")
    need(len(m.architectures) >= 1, "model.architectures", "needs at least one width list")
    for ws in m.architectures:
        need(isinstance(ws, tuple) and len(ws) >= 1 and all(int(w) >= 1 for w in ws),
             "model.architectures", f"invalid width list {ws!r}")
    need(t.rounds >= 1, "training.rounds", "must be >= 1")
    need(t.epochs >= 0, "training.epochs", "must be >= 0")
    need(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    need(t.lr >= 0, "training.lr", "must be >= 0")
    need(0 <= t.participation <= 1, "training.participation", "must be in [0, 1]")
    need(l.tau > 0, "loss.tau", "must be > 0")
    for k in ("lambda1", "lambda2", "lambda3"):
        need(getattr(l, k) >= 0, f"loss.{k}", "must be >= 0")
    need(l.l_d_form in ("as_written", "log_form"), "loss.l_d_form", "must be 'as_written' or 'log_form'")
    need(0 <= f.eta <= 1, "fusion.eta", "must be in [0, 1]")
    need(1 <= f.k_top <= m.d_z, "fusion.k_top", f"must be in [1, d_z={m.d_z}]")
    need(cfg.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
    need(len(cfg.seeds) >= 1, "seeds", "needs at least one seed")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    need(all(a > 0 for a in cfg.sweep.alphas), "sweep.alphas", "must all be > 0")
    need(all(int(e) >= 0 for e in cfg.sweep.epochs), "sweep.epochs", "must all be >= 0")
    return cfg


def parse_config(source=None, overrides: dict | None = None, profile: str | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`.

    ``source`` is a YAML path, a YAML string, a mapping or ``None``.
    Precedence: defaults < profile < file < ``overrides`` (dotted keys).
    The ``FEDDBP_OUTPUT_DIR`` environment variable beats the file's
    ``output_dir`` but not an explicit override.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if os.path.exists(text):
            with open(text) as fh:
                text = fh.read()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of blocks")
    raw = dict(raw)
    prof = profile or raw.pop("profile", None)
    raw.pop("profile", None)
    if prof is not None:
        if prof not in PROFILES:
            raise ConfigError(f"profile: unknown profile {prof!r}")
        raw = _merge(PROFILES[prof], raw)
    env_out = os.environ.get("FEDDBP_OUTPUT_DIR")
    if env_out:
        raw["output_dir"] = env_out
    if overrides:
        raw = _merge(raw, _expand(overrides))
    return validate(_build(RunConfig, raw, ""))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
