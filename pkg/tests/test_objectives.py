import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddbp.errors import ConfigError, ProtocolError
from feddbp.gradcheck import numerical_gradient, relative_error
from feddbp.objectives import (
    LossConfig,
    adaptive_margin,
    boundary_penalty,
    contrastive_decision_loss,
    cross_entropy,
    decision_distances,
    decision_loss_from_distances,
    l2_alignment_loss,
    total_loss,
)
from feddbp.prototypes import PrototypeKind, PrototypeSet
from feddbp.tensor import Tape


def protos(P, present=None):
    P = np.asarray(P, dtype=np.float64)
    present = np.ones(P.shape[0], bool) if present is None else present
    return PrototypeSet(P, present, PrototypeKind.GLOBAL)


def scalar_ce(logits, y):
    mx = max(logits)
    return -(logits[y] - mx - math.log(sum(math.exp(v - mx) for v in logits)))


def test_cross_entropy_examples():
    tape = Tape()
    assert cross_entropy(tape, tape.constant(np.zeros((1, 10))), [4]).item() == pytest.approx(math.log(10))
    sat = np.zeros((1, 5))
    sat[0, 2] = 30.0
    assert cross_entropy(tape, tape.constant(sat), [2]).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    L, y = rng.normal(size=(4, 3)), [0, 2, 1, 2]
    want = sum(scalar_ce(list(L[i]), y[i]) for i in range(4)) / 4
    assert abs(cross_entropy(tape, tape.constant(L), y).item() - want) < 1e-10
    with pytest.raises(IndexError):
        cross_entropy(tape, tape.constant(L), [0, 3, 1, 2])


def test_l2_alignment_examples():
    tape = Tape()
    P = protos([[1.0, 0.0], [0.0, 2.0]])
    assert l2_alignment_loss(tape, tape.constant([[1.0, 0.0], [0.0, 2.0]]), [0, 1], P).item() == 0.0
    assert l2_alignment_loss(tape, tape.constant([[0.0, 0.0]]), [0], P).item() == 1.0
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(2, 2))
    want = (sum((Z[0] - [1, 0]) ** 2) + sum((Z[1] - [0, 2]) ** 2)) / 2
    assert abs(l2_alignment_loss(tape, tape.constant(Z), [0, 1], P).item() - want) < 1e-10


def test_l2_alignment_missing_prototype():
    tape = Tape()
    P = protos([[1.0, 0.0], [0.0, 0.0]], np.array([True, False]))
    with pytest.raises(ProtocolError):
        l2_alignment_loss(tape, tape.constant([[0.0, 0.0]]), [1], P)


def test_l2_alignment_gradient_reaches_features_only():
    tape = Tape()
    z = tape.variable([[0.5, -1.0]])
    tape.backward(l2_alignment_loss(tape, z, [0], protos([[1.0, 0.0]])))
    np.testing.assert_allclose(z.grad, [[-1.0, -2.0]])


def test_translation_detection():
    rng = np.random.default_rng(2)
    Z, P = rng.normal(size=(4, 3)), protos(rng.normal(size=(2, 3)))
    y = [0, 1, 1, 0]
    tape = Tape()
    base = l2_alignment_loss(tape, tape.constant(Z), y, P).item()
    for _ in range(10):
        v = rng.normal(size=3) * 1e-2
        assert l2_alignment_loss(tape, tape.constant(Z + v), y, P).item() != base


def test_adaptive_margin_examples():
    # positives 1 and 2, negatives 3 and 5
    d = np.array([[1.0, 3.0], [5.0, 2.0]])
    assert adaptive_margin(d, [0, 1]) == 2.75
    assert adaptive_margin(np.full((3, 4), 1.7), [0, 1, 2]) == pytest.approx(1.7)
    rng = np.random.default_rng(3)
    D, y = rng.uniform(0, 2, (4, 3)), [2, 0, 1, 1]
    pos = [D[i][y[i]] for i in range(4)]
    neg = [D[i][c] for i in range(4) for c in range(3) if c != y[i]]
    assert abs(adaptive_margin(D, y) - (sum(pos) / 4 + sum(neg) / 8) / 2) < 1e-10
    with pytest.raises(ConfigError):
        adaptive_margin(np.ones((2, 1)), [0, 0])


def test_boundary_penalty_examples():
    tape = Tape()
    row = tape.constant([0.1, 2.0, 3.0, 2.5])
    assert boundary_penalty(tape, row, 0, 2.0, 0.07).item() == 3.0
    tau, m = 0.5, 1.0
    row = tape.constant([0.2, m - tau, 1.5])
    assert boundary_penalty(tape, row, 0, m, tau).item() == pytest.approx(math.exp(-1) + 1.0)
    rng = np.random.default_rng(4)
    r = rng.uniform(0, 2, 5)
    want = sum(math.exp(-max(0.0, 1.1 - r[c]) / 0.3) for c in range(5) if c != 2)
    assert abs(boundary_penalty(tape, tape.constant(r), 2, 1.1, 0.3).item() - want) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), C=st.integers(2, 6), tau=st.floats(0.05, 1.0))
def test_boundary_penalty_bounds(seed, C, tau):
    rng = np.random.default_rng(seed)
    D = rng.uniform(0, 2, (3, C))
    y = rng.integers(0, C, 3)
    m = adaptive_margin(D, y)
    M = boundary_penalty(Tape(), Tape.constant(D), y, m, tau).data
    assert np.all(M <= C - 1 + 1e-12)
    assert np.all(M >= (C - 1) * math.exp(-m / tau) - 1e-12)


def test_decision_loss_symmetric_two_class():
    tape = Tape()
    d = tape.constant([[0.7, 0.7], [0.3, 0.3]])
    assert decision_loss_from_distances(tape, d, [0, 1], 0.07).item() == pytest.approx(-0.5)


def test_decision_loss_scalar_evaluation():
    tape = Tape()
    d = tape.constant([[0.0, 10.0]])
    got = decision_loss_from_distances(tape, d, [0], 1.0).item()
    assert got == pytest.approx(-1 / (1 + math.exp(-10)), rel=1e-12)
    assert got == pytest.approx(-0.99995, abs=1e-5)
    log_form = decision_loss_from_distances(tape, d, [0], 1.0, form="log_form").item()
    assert log_form == pytest.approx(math.log(1 + math.exp(-10)), rel=1e-12)


def test_hard_mining_adds_c_minus_one_when_all_beyond_margin():
    tape = Tape()
    tau = 0.2
    D = tape.constant([[0.1, 1.5, 1.8]])
    m = 1.0
    e = np.exp(-D.data[0] / tau)
    off = -decision_loss_from_distances(tape, D, [0], tau).item()
    pen = boundary_penalty(tape, D, [0], m, tau)
    on = -decision_loss_from_distances(tape, D, [0], tau, penalty=pen).item()
    assert e[0] / off == pytest.approx(e.sum())
    assert e[0] / on - e[0] / off == pytest.approx(2.0)


def test_mining_off_equals_zero_penalty_exactly():
    rng = np.random.default_rng(5)
    D, y = rng.uniform(0, 2, (4, 3)), [0, 2, 1, 0]
    tape = Tape()
    a = decision_loss_from_distances(tape, tape.constant(D), y, 0.07).item()
    b = decision_loss_from_distances(tape, tape.constant(D), y, 0.07, penalty=tape.constant(np.zeros(4))).item()
    assert a == b


def test_as_written_range():
    rng = np.random.default_rng(6)
    for _ in range(20):
        Z = rng.normal(size=(4, 5))
        P = protos(rng.normal(size=(3, 5)))
        for hard in (True, False):
            loss, m = contrastive_decision_loss(Tape(), Tape.constant(Z), [0, 1, 2, 0], P,
                                                LossConfig(hard_mining=hard))
            assert -1.0 < loss.item() <= 0.0
            assert m >= 0.0


def test_contrastive_loss_scale_invariance():
    rng = np.random.default_rng(7)
    Z, P, y = rng.normal(size=(3, 4)), protos(rng.normal(size=(3, 4))), [0, 2, 1]
    cfg = LossConfig(tau=0.3)
    base, _ = contrastive_decision_loss(Tape(), Tape.constant(Z), y, P, cfg)
    scaled = Z * np.array([[2.0], [0.1], [7.5]])
    other, _ = contrastive_decision_loss(Tape(), Tape.constant(scaled), y, P, cfg)
    assert other.item() == pytest.approx(base.item(), rel=1e-12)


def test_contrastive_loss_needs_every_class():
    P = protos(np.eye(3), np.array([True, True, False]))
    with pytest.raises(ProtocolError):
        contrastive_decision_loss(Tape(), Tape.constant(np.ones((1, 3))), [0], P, LossConfig())


def test_decision_distances_are_normalized():
    tape = Tape()
    P = protos([[3.0, 0.0], [0.0, 0.5]])
    d = decision_distances(tape, tape.constant([[10.0, 0.0]]), P).data
    np.testing.assert_allclose(d, [[0.0, math.sqrt(2)]])


def test_total_loss_weights():
    tape = Tape()
    a, b, c, d = (tape.constant(v) for v in (0.3, 1.7, 0.25, -0.4))
    parts = {"l_sce": a, "l_dce": b, "l_s": c, "l_d": d}
    assert total_loss(tape, parts, LossConfig()).item() == 0.3 + 1.7 + 10 * 0.25 + -0.4
    zero = LossConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    assert total_loss(tape, parts, zero).item() == 0.3
    rng = np.random.default_rng(8)
    vals = rng.normal(size=4)
    cfg = LossConfig(lambda1=0.5, lambda2=2.0, lambda3=3.0)
    parts = dict(zip(("l_sce", "l_dce", "l_s", "l_d"), (tape.constant(v) for v in vals)))
    assert total_loss(tape, parts, cfg).item() == vals[0] + 0.5 * vals[1] + 2.0 * vals[2] + 3.0 * vals[3]
    # round 0: only the cross-entropy terms
    assert total_loss(tape, {"l_sce": a, "l_dce": b}, LossConfig()).item() == 0.3 + 1.7


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0.0)
    with pytest.raises(ConfigError):
        LossConfig(lambda2=-1.0)
    with pytest.raises(ConfigError):
        LossConfig(l_d_form="hinge")


def test_contrastive_gradient_at_default_temperature():
    # tau=0.07 is steep; a smaller step keeps the central difference's
    # truncation error below the tolerance
    rng = np.random.default_rng(9)
    cfg = LossConfig(tau=0.07)
    for _ in range(10):
        Z, P, y = rng.uniform(-1, 1, (3, 4)), protos(rng.uniform(-1, 1, (3, 4))), [0, 1, 2]
        tape = Tape()
        z = tape.variable(Z)
        _, m = contrastive_decision_loss(tape, z, y, P, cfg)
        loss, _ = contrastive_decision_loss(tape, z, y, P, cfg, margin=m)
        tape.backward(loss)
        f = lambda x: contrastive_decision_loss(Tape(), Tape.constant(x), y, P, cfg, margin=m)[0].item()
        assert relative_error(z.grad, numerical_gradient(f, Z, step=1e-4)) < 1e-4
