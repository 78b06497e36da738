"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test records one ``[PASS]``/``[FAIL]`` line; the lines are printed
together at the end of the pytest run.
"""

import time

import pytest

from feddbp import verify

from conftest import ACCEPTANCE_LINES


def record(name, budget, fn, *args, **kw):
    start = time.perf_counter()
    passed, detail = fn(*args, **kw)
    seconds = time.perf_counter() - start
    in_time = budget is None or seconds < budget
    ok = bool(passed) and in_time
    limit = f", limit {budget:.0f}s" if budget is not None else ""
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({seconds:.2f}s{limit})")
    assert passed, detail
    assert in_time, f"{name} took {seconds:.1f}s, budget {budget}s"


def test_gradient_suite():
    record("gradient suite", 30, verify.gradient_suite, instances=50)


def test_fisher_oracle():
    record("fisher oracle", 10, verify.fisher_oracle, models=20)


def test_fusion_oracle():
    record("fusion oracle", 5, verify.fusion_oracle, instances=1000)


def test_averaging_oracle():
    record("averaging oracle", 5, verify.averaging_oracle)


def test_partition_suite():
    record("partition suite", 30, verify.partition_suite, configs=100, entropy_seeds=20)


def test_equivalence_checks():
    def both():
        a_ok, a = verify.mining_off_equivalence()
        b_ok, b = verify.no_hard_equivalence()
        return a_ok and b_ok, f"{a}; {b}"

    record("equivalence checks", None, both)


def test_codec():
    record("codec", 5, verify.codec_suite, messages=10_000)


def test_weighted_objective():
    record("weighted objective", None, verify.weighted_objective_check)


@pytest.mark.slow
def test_determinism():
    record("determinism (desk profile)", None, verify.determinism_check)


@pytest.mark.slow
def test_directional_reproduction():
    record("directional reproduction (desk profile, 5 seeds)", 600, verify.directional_check,
           seeds=(0, 1, 2, 3, 4))
