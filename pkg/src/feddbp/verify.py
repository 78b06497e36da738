"""Property suite behind ``feddbp verify`` and the acceptance tests.

Each check pairs the library path with an independent oracle (finite
differences, brute-force loops, full sorts) and returns a
:class:`CheckResult`.  Nothing here is used by the training code.
"""

from __future__ import annotations

import filecmp
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from .client import ClientUpload
from .codec import Direction, Download, RoundMessage, decode, encode
from .config import RunConfig, parse_config
from .data import LabeledDataset, dirichlet_partition, generate_synthetic, label_entropy
from .errors import CodecError
from .evaluation import run_experiment, run_single, weighted_objective, write_run
from .fisher import channel_scores
from .gradcheck import FD_STEP, REL_TOL, numerical_gradient, relative_error
from .models import ArchitectureSpec, build_client_model, embed
from .objectives import (
    LossConfig,
    adaptive_margin,
    contrastive_decision_loss,
    cross_entropy,
    decision_distances,
    decision_loss_from_distances,
    l2_alignment_loss,
)
from .prototypes import ImportanceScores, PrototypeKind, PrototypeSet
from .protocol import average_global_prototypes, fuse_personalized_prototype, topk_channels
from .tensor import Tape


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, *args, **kw) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn(*args, **kw)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


# ----------------------------------------------------------------------
# gradient suite

def _random_prototypes(rng, C, d) -> PrototypeSet:
    return PrototypeSet(rng.uniform(-1, 1, (C, d)), np.ones(C, dtype=bool), PrototypeKind.GLOBAL)


def _margin_is_clear(z, y, protos, tol=1e-2) -> tuple[bool, float]:
    d = decision_distances(Tape(), Tape.constant(z), protos).data
    m = adaptive_margin(d, y)
    neg = np.ones_like(d, dtype=bool)
    neg[np.arange(len(y)), y] = False
    return bool(np.all(np.abs(m - d[neg]) > tol)), m


def _grad_case(kind: str, rng, tau_range=(0.25, 1.0)):
    """Draw one random instance; returns ``(loss_fn, x0)`` with ``loss_fn(x, tape) -> Tensor``."""
    while True:
        B, d, C = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 6))
        y = rng.integers(0, C, B)
        tau = float(rng.uniform(*tau_range))
        x0 = rng.uniform(-1, 1, (B, d))
        if kind == "log_softmax_pick":
            logits = rng.uniform(-1, 1, C)
            label = int(rng.integers(0, C))
            return (lambda x, tape: tape.log_softmax_pick(x, label)), logits
        if kind in ("l_sce", "l_dce"):
            W, b = rng.uniform(-1, 1, (C, d)), rng.uniform(-1, 1, C)

            def f(x, tape, W=W, b=b, y=y):
                return cross_entropy(tape, tape.linear(x, Tape.constant(W), Tape.constant(b)), y)

            return f, x0
        protos = _random_prototypes(rng, C, d)
        if kind == "l_s":
            return (lambda x, tape: l2_alignment_loss(tape, x, y, protos)), x0
        form = "log_form" if kind.endswith("log") else "as_written"
        hard = kind.startswith("l_d_mined")
        if np.any(np.linalg.norm(x0, axis=1) < 0.2):
            continue
        if hard:
            clear, m = _margin_is_clear(x0, y, protos)
            if not clear:
                continue
        else:
            m = None
        cfg = LossConfig(tau=tau, hard_mining=hard, l_d_form=form)
        # the margin is a per-batch constant, so the oracle holds it fixed too
        return (lambda x, tape: contrastive_decision_loss(tape, x, y, protos, cfg, margin=m)[0]), x0


GRADIENT_KINDS = ("l_sce", "l_dce", "l_s", "l_d_plain", "l_d_plain_log", "l_d_mined", "l_d_mined_log",
                  "log_softmax_pick")


def _tape_grad(fn, x0):
    tape = Tape()
    x = tape.variable(x0)
    tape.backward(fn(x, tape))
    return np.array(x.grad)


def gradient_suite(instances: int = 50, seed: int = 0, tau_range=(0.25, 1.0), step: float = FD_STEP):
    """Worst elementwise relative error per loss over random instances.

    Pass/fail uses ``step``.  The same instances are also checked at
    ``step / 10`` and reported: central differences carry O(step**2)
    truncation error, so a genuine tape bug keeps its error while
    truncation shrinks about a hundredfold.
    """
    rng = np.random.default_rng(seed)
    worst, finer = {}, {}
    for kind in GRADIENT_KINDS:
        worst[kind] = finer[kind] = 0.0
        for _ in range(instances):
            fn, x0 = _grad_case(kind, rng, tau_range)
            analytic = _tape_grad(fn, x0)
            f = lambda x: fn(Tape.constant(x), Tape()).item()
            worst[kind] = max(worst[kind], relative_error(analytic, numerical_gradient(f, x0, step)))
            finer[kind] = max(finer[kind], relative_error(analytic, numerical_gradient(f, x0, step / 10)))
    ok = all(v < REL_TOL for v in worst.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    fine = ", ".join(f"{k}={v:.1e}" for k, v in finer.items())
    return ok, (f"{instances} instances each, tau in {list(tau_range)}, step {step:g}; "
                f"worst rel err {detail}; at step {step / 10:g}: {fine}")


# ----------------------------------------------------------------------
# Fisher oracle

def _log_prob(z_row, W, b, label) -> float:
    logits = W @ z_row + b
    top = logits.max()
    return float(logits[label] - top - math.log(np.exp(logits - top).sum()))


def fisher_oracle(models: int = 20, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst, dead_ok = 0.0, True
    for i in range(models):
        C, d_z, d_in = int(rng.integers(2, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 5))
        widths = tuple(int(w) for w in rng.integers(2, 6, rng.integers(1, 3)))
        spec = ArchitectureSpec((widths,), d_in, d_z, C)
        model = build_client_model(spec, 0, seed * 1000 + i)
        dead = int(rng.integers(0, d_z))
        W = model.params["head.weight"].copy()
        W[:, dead] = 0.0
        model.params["head.weight"] = W
        n = int(rng.integers(C, 3 * C + 1))
        data = LabeledDataset(rng.normal(size=(n, d_in)), rng.integers(0, C, n), C)
        got = channel_scores(model, data)

        z = embed(model, data.features)
        b = model.params["head.bias"]
        sums = np.zeros((C, d_z))
        counts = np.zeros(C)
        for zi, yi in zip(z, data.labels):
            g = numerical_gradient(lambda v: _log_prob(v, W, b, yi), zi)
            sums[yi] += g ** 2
            counts[yi] += 1
        have = counts > 0
        expect = sums[have] / counts[have, None]
        worst = max(worst, relative_error(got.scores[have], expect))
        dead_ok &= bool(np.all(got.scores[:, dead] == 0.0))
        dead_ok &= bool(np.array_equal(got.present, have))
    return worst < REL_TOL and dead_ok, f"{models} models; worst rel err {worst:.1e}; dead channels exact zero: {dead_ok}"


# ----------------------------------------------------------------------
# fusion / averaging oracles

def _brute_topk(row, k):
    ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return set(ranked[:k])


def _brute_fuse(local, glob, scores, eta, k):
    C, d = glob.vectors.shape
    out = [[None] * d for _ in range(C)]
    for c in range(C):
        top = _brute_topk(list(scores.scores[c]), k) if local.present[c] else set()
        for j in range(d):
            if j in top:
                out[c][j] = eta * local.vectors[c, j] + (1.0 - eta) * glob.vectors[c, j]
            else:
                out[c][j] = glob.vectors[c, j]
    return np.array(out, dtype=np.float64)


def fusion_oracle(instances: int = 1000, seed: int = 2):
    rng = np.random.default_rng(seed)
    mismatches = ties = 0
    for i in range(instances):
        C, d = int(rng.integers(1, 6)), int(rng.integers(1, 17))
        k = int(rng.integers(1, d + 1))
        eta = float(rng.choice([0.0, 1.0, rng.uniform()]))
        mode = i % 3
        if mode == 0:
            raw = np.full((C, d), float(rng.uniform()))
            ties += 1
        elif mode == 1:
            raw = rng.integers(0, 3, (C, d)).astype(float)
            ties += 1
        else:
            raw = rng.uniform(0, 1, (C, d))
        local_present = rng.uniform(size=C) < 0.7
        global_present = local_present | (rng.uniform(size=C) < 0.5)
        local = PrototypeSet(rng.normal(size=(C, d)), local_present)
        glob = PrototypeSet(rng.normal(size=(C, d)), global_present, PrototypeKind.GLOBAL)
        scores = ImportanceScores(raw, np.where(local_present, rng.integers(1, 9, C), 0))
        got = fuse_personalized_prototype(local, glob, scores, eta, k)
        want = _brute_fuse(local, glob, scores, eta, k)
        if got.vectors[global_present].tobytes() != want[global_present].tobytes():
            mismatches += 1
        for c in range(C):
            if topk_channels(raw[c], k) != _brute_topk(list(raw[c]), k):
                mismatches += 1
    return mismatches == 0, f"{instances} instances ({ties} with tied scores); mismatches {mismatches}"


def _random_uploads(rng, n_clients, C, d):
    ups = []
    for k in range(n_clients):
        present = rng.uniform(size=C) < 0.6
        counts = np.where(present, rng.integers(1, 20, C), 0)
        ups.append(ClientUpload(k, PrototypeSet(rng.normal(size=(C, d)), present),
                                ImportanceScores(rng.uniform(size=(C, d)), counts), int(counts.sum()) or 1))
    return ups


def averaging_oracle(trials: int = 200, seed: int = 3):
    rng = np.random.default_rng(seed)
    worst, coverage_ok = 0.0, True
    for _ in range(trials):
        C, d = int(rng.integers(2, 8)), int(rng.integers(1, 9))
        ups = _random_uploads(rng, int(rng.integers(1, 7)), C, d)
        got = average_global_prototypes(ups)
        for c in range(C):
            holders = [u.prototypes.vectors[c] for u in ups if u.prototypes.present[c]]
            coverage_ok &= bool(got.present[c]) == bool(holders)
            if holders:
                mean = [sum(h[j] for h in holders) / len(holders) for j in range(d)]
                worst = max(worst, float(np.max(np.abs(got.vectors[c] - mean))))
    return worst <= 1e-10 and coverage_ok, f"{trials} trials; max abs err {worst:.1e}; coverage exact: {coverage_ok}"


# ----------------------------------------------------------------------
# partition suite

def partition_suite(configs: int = 100, entropy_seeds: int = 20, seed: int = 4):
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(configs):
        C = int(rng.integers(2, 8))
        data = generate_synthetic(C, int(rng.integers(2, 30)), 2 * C, 1.0, i)
        K = int(rng.integers(2, min(12, len(data)) + 1))
        alpha = float(10 ** rng.uniform(-2, 2))
        plan = dirichlet_partition(data, K, alpha, i)
        flat = sorted(j for ix in plan.client_indices for j in ix)
        if flat != list(range(len(data))) or min(plan.sizes()) < 1:
            bad += 1
    data = generate_synthetic(10, 50, 20, 1.0, 0)

    def mean_entropy(alpha):
        vals = []
        for s in range(entropy_seeds):
            h = dirichlet_partition(data, 20, alpha, s).histograms(data)
            vals.extend(label_entropy(row) for row in h)
        return float(np.mean(vals))

    low, high = mean_entropy(0.1), mean_entropy(10.0)
    ok = bad == 0 and low < high
    return ok, (f"{configs} configs, {bad} violations; mean label entropy "
                f"alpha=0.1: {low:.3f} < alpha=10: {high:.3f}")


# ----------------------------------------------------------------------
# equivalences

def mining_off_equivalence(instances: int = 200, seed: int = 5):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(instances):
        B, d, C = int(rng.integers(1, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 6))
        y = rng.integers(0, C, B)
        tape = Tape()
        dist = tape.variable(rng.uniform(0, 2, (B, C)))
        for form in ("as_written", "log_form"):
            plain = decision_loss_from_distances(tape, dist, y, 0.07, None, form).item()
            zeroed = decision_loss_from_distances(tape, dist, y, 0.07, Tape.constant(np.zeros(B)), form).item()
            mismatches += plain != zeroed
    return mismatches == 0, f"{instances} instances x 2 forms; mismatches {mismatches}"


def small_config() -> RunConfig:
    return parse_config(profile="desk", overrides={"training.rounds": 3, "training.epochs": 2,
                                                   "partition.num_clients": 4, "dataset.per_class": 40})


def no_hard_equivalence(cfg: RunConfig | None = None, seed: int = 0):
    cfg = cfg or small_config()
    a = run_single(cfg, "no_hard", seed)
    b = run_single(cfg.replace(**{"loss.hard_mining": False}), "full", seed)
    same = a.client_rows == b.client_rows and a.round_rows == b.round_rows
    return same, f"{len(a.round_rows)} rounds; traces bit-identical: {same}"


# ----------------------------------------------------------------------
# codec

def _random_message(rng) -> RoundMessage:
    C, d = int(rng.integers(1, 12)), int(rng.integers(1, 10))
    present = rng.uniform(size=C) < 0.7
    protos = PrototypeSet(rng.normal(size=(C, d)) * 10 ** rng.uniform(-5, 5), present,
                          PrototypeKind(int(rng.integers(0, 3))))
    rnd = int(rng.integers(0, 2 ** 32))
    cid = int(rng.integers(0, 2 ** 32))
    if rng.uniform() < 0.5:
        counts = np.where(present, rng.integers(1, 2 ** 40, C), 0)
        up = ClientUpload(cid, protos, ImportanceScores(rng.uniform(size=(C, d)), counts),
                          int(rng.integers(1, 2 ** 63)))
        return RoundMessage(Direction.UPLOAD, rnd, up)
    return RoundMessage(Direction.DOWNLOAD, rnd, Download(cid, protos))


def codec_suite(messages: int = 10_000, seed: int = 6):
    rng = np.random.default_rng(seed)
    failures = 0
    sample = None
    for _ in range(messages):
        msg = _random_message(rng)
        blob = encode(msg)
        if decode(blob) != msg or encode(decode(blob)) != blob:
            failures += 1
        if sample is None and msg.direction == Direction.UPLOAD:
            sample = blob
    corruptions = {}
    try:
        decode(b"XXXX" + sample[4:])
    except CodecError as exc:
        corruptions["bad_magic"] = exc.offset == 0
    try:
        decode(sample[:4] + (99).to_bytes(2, "little") + sample[6:])
    except CodecError as exc:
        corruptions["bad_version"] = exc.offset == 4
    try:
        # cut inside the prototype matrix: header(11) + client(8) + prototype header bytes
        decode(sample[:11 + 8 + 4 + 9 + 3])
    except CodecError as exc:
        corruptions["truncated"] = exc.section == "prototypes"
    corrupt_ok = len(corruptions) == 3 and all(corruptions.values())
    return failures == 0 and corrupt_ok, (f"{messages} round trips, {failures} failures; "
                                          f"corruptions detected: {corruptions}")


def weighted_objective_check():
    cases = [
        ([(1, 0.4), (3, 0.8)], 0.25 * 0.4 + 0.75 * 0.8),
        ([(5, 1.5), (5, 2.5)], 2.0),
        ([(7, 0.123)], 0.123),
        ([(2, 1.0), (6, 3.0), (2, -1.0)], 0.2 * 1.0 + 0.6 * 3.0 + 0.2 * -1.0),
    ]
    worst = max(abs(weighted_objective(pairs) - want) for pairs, want in cases)
    return worst <= 1e-12, f"{len(cases)} hand cases; max abs err {worst:.1e}"


# ----------------------------------------------------------------------
# run-level checks (slow)

def determinism_check(cfg: RunConfig | None = None, seed: int = 0, slack: float = 1.05):
    """Replay one run and compare metric files byte for byte.

    The whole check (both runs, writes and comparison) must stay within
    ``2 * slack`` times the mean single run; ``slack`` absorbs timer noise.
    """
    cfg = cfg or parse_config(profile="desk")
    files = ("metrics.csv", "rounds.csv")
    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        times = []
        for rep in ("a", "b"):
            t0 = time.perf_counter()
            write_run(run_single(cfg, "full", seed), cfg, os.path.join(tmp, rep))
            times.append(time.perf_counter() - t0)
        same = all(filecmp.cmp(os.path.join(tmp, "a", f), os.path.join(tmp, "b", f), shallow=False)
                   for f in files)
    total = time.perf_counter() - start
    one = float(np.mean(times))
    within = total <= 2 * slack * one
    return same and within, (f"metric CSVs byte-identical: {same}; check took {total:.1f}s "
                             f"vs one run {one:.1f}s (ratio {total / one:.2f}, limit {2 * slack:.2f})")


def directional_check(cfg: RunConfig | None = None, seeds=(0, 1, 2, 3, 4)):
    cfg = cfg or parse_config(profile="desk")
    res = {v: run_experiment(cfg, v, seeds) for v in
           ("full", "l2_only_baseline", "no_personalization", "no_hard")}

    def gap(other):
        diffs = [a.final_accuracy - b.final_accuracy for a, b in zip(res["full"].runs, res[other].runs)]
        mean = float(np.mean(diffs))
        std = float(np.std(diffs, ddof=1)) if len(diffs) > 1 else 0.0
        return mean, std

    parts = [f"{v}={r.mean:.4f}+-{r.std:.4f}" for v, r in res.items()]
    gaps = {v: gap(v) for v in ("l2_only_baseline", "no_personalization", "no_hard")}
    parts += [f"full-{v}={m:+.4f}+-{s:.4f}" for v, (m, s) in gaps.items()]
    ok = res["full"].mean >= res["l2_only_baseline"].mean and res["full"].mean >= res["no_personalization"].mean
    return ok, "; ".join(parts)


FAST_CHECKS = {
    "gradient suite": gradient_suite,
    "fisher oracle": fisher_oracle,
    "fusion oracle": fusion_oracle,
    "averaging oracle": averaging_oracle,
    "partition suite": partition_suite,
    "mining off == zero penalty": mining_off_equivalence,
    "no_hard == full with hard mining off": no_hard_equivalence,
    "codec": codec_suite,
    "weighted objective": weighted_objective_check,
}

SLOW_CHECKS = {
    "determinism (desk profile)": determinism_check,
    "directional reproduction (desk profile)": directional_check,
}


def run_checks(include_slow: bool = False, report=print) -> list:
    checks = dict(FAST_CHECKS)
    if include_slow:
        checks.update(SLOW_CHECKS)
    results = []
    for name, fn in checks.items():
        res = _timed(name, fn)
        report(res.line())
        results.append(res)
    return results
