import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import GradStub, LinearStub, onehot
from nullnet import attacks
from nullnet.attacks import L0, LINF, AttackBudget


def test_budget_feature_count():
    assert AttackBudget(L0, 0.1).features(784) == 78
    assert AttackBudget(L0, 0.0).features(784) == 0
    assert AttackBudget(L0, 0.03).features(100) == 3  # 0.03 * 100 is 2.9999999999999996
    assert AttackBudget(LINF, 0.1).delta_max(784) == 1.0
    assert AttackBudget(L0, 0.1).delta_max(784) == 784.0
    with pytest.raises(ValueError):
        AttackBudget(L0, 1.5)
    with pytest.raises(ValueError):
        AttackBudget("L2", 0.1)


# -- grad0 ---------------------------------------------------------------------

def test_grad0_hand_example():
    stub = GradStub([1.0, -3.0, 0.1], [0.3, 0.7])
    x = np.array([0.2, 0.8, 0.5])
    assert attacks.linearized_gain(stub.gradient, x, [0.2, 0.0, 0.5]) == pytest.approx(2.4)
    res = attacks.grad0(stub, x, 1, AttackBudget(L0, 1 / 3))
    np.testing.assert_array_equal(res.x_star, [0.2, 0.0, 0.5])
    assert res.perturbation_l0 == 1
    assert not res.feasible  # the stub's label never moves


def test_grad0_zero_budget_is_identity():
    stub = GradStub([1.0, -3.0, 0.1], [0.3, 0.7])
    x = np.array([0.2, 0.8, 0.5])
    res = attacks.grad0(stub, x, 1, AttackBudget(L0, 0.0))
    np.testing.assert_array_equal(res.x_star, x)
    assert not res.feasible


def test_grad0_fixed_point_at_zero():
    stub = GradStub([-1.0, -2.0, -0.5], [0.3, 0.7])
    res = attacks.grad0(stub, np.zeros(3), 1, AttackBudget(L0, 2 / 3))
    np.testing.assert_array_equal(res.x_star, np.zeros(3))
    assert res.perturbation_l0 == 0 and not res.feasible


def test_grad0_feasible_when_label_changes():
    clf =LinearStub([[-1.0, 1.0], [0.0, 0.0]], [0.5, 0.0])
    res = attacks.grad0(clf, [0.0, 0.5], 0, AttackBudget(L0, 0.5))
    np.testing.assert_array_equal(res.x_star, [1.0, 0.5])
    assert res.feasible and res.achieved_label == 1


# -- fgs -----------------------------------------------------------------------

def test_fgs_examples():
    res = attacks.fgs(GradStub([2.0, -0.1], [0.6, 0.4]), [0.5, 0.5], 0, AttackBudget(LINF, 0.1))
    np.testing.assert_allclose(res.x_star, [0.6, 0.4])
    res = attacks.fgs(GradStub([1.0], [0.6, 0.4]), [0.95], 0, AttackBudget(LINF, 0.1))
    np.testing.assert_array_equal(res.x_star, [1.0])
    res = attacks.fgs(GradStub([0.0, 0.0], [0.6, 0.4]), [0.3, 0.7], 0, AttackBudget(LINF, 0.1))
    np.testing.assert_array_equal(res.x_star, [0.3, 0.7])
    assert not res.feasible


def test_budget_norm_mismatch():
    stub = GradStub([1.0], [0.6, 0.4])
    with pytest.raises(ValueError):
        attacks.fgs(stub, [0.5], 0, AttackBudget(L0, 0.1))
    with pytest.raises(ValueError):
        attacks.grad0(stub, [0.5], 0, AttackBudget(LINF, 0.1))


# -- mg ------------------------------------------------------------------------

def test_mg_already_misclassified():
    clf = LinearStub([[0.0, 0.0]], [0.0, 1.0])
    res = attacks.mg(clf, [0.5], 0, 3)
    assert res.feasible and res.perturbation_l0 == 0
    np.testing.assert_array_equal(res.x_star, [0.5])


def test_mg_one_flip_matches_brute_force():
    # two features, two classes; a single flip crosses the boundary
    clf = LinearStub([[0.2, -0.2], [-1.0, 1.0]], [0.7, 0.0])
    x = np.array([0.5, 0.4])
    res = attacks.mg(clf, x, 0, 2)
    assert res.feasible and res.perturbation_l0 == 1
    winners = []
    for i in range(2):
        for v in (0.0, 1.0):
            cand = x.copy()
            cand[i] = v
            if clf.predict(cand)[0] != 0:
                winners.append(cand)
    assert any(np.array_equal(res.x_star, w) for w in winners)


def test_mg_budget_exhaustion():
    clf = LinearStub([[0.01, -0.01], [0.01, -0.01], [0.01, -0.01]], [5.0, 0.0])
    res = attacks.mg(clf, [0.5, 0.5, 0.5], 0, 2)
    assert not res.feasible and res.perturbation_l0 == 2
    with pytest.raises(ValueError):
        attacks.mg(clf, [0.5, 0.5, 0.5], 0, 0)


def test_mg_never_reports_null_as_success():
    W = np.zeros((2, 3))
    W[:, 2] = 3.0
    clf = LinearStub(W, [1.0, 0.0, 0.0], null_index=2)
    res = attacks.mg(clf, [0.0, 0.0], 0, 2)
    assert res.achieved_label == 2 and not res.feasible


# -- greedy targeted -----------------------------------------------------------

def exhaustive_greedy(clf, x, target, budget):
    """Evaluate every unflipped single-feature move by its linearized score."""
    x = x.copy()
    seq = []
    flipped = set()
    for _ in range(budget):
        if clf.predict(x)[0] == target:
            return x, seq, True
        g = clf.probs_and_input_gradient(x[None, :], onehot(target, clf.class_count)[None, :])[1][0]
        best, best_score = None, 0.0
        for i in range(x.size):
            if i in flipped:
                continue
            for v in (0.0, 1.0):
                score = g[i] * (v - x[i])
                if score < best_score:
                    best, best_score, best_v = i, score, v
        if best is None:
            return x, seq, False
        x[best] = best_v
        flipped.add(best)
        seq.append(best)
    return x, seq, bool(clf.predict(x)[0] == target)


def test_greedy_matches_exhaustive_on_linear_stub():
    rng = np.random.default_rng(3)
    for _ in range(25):
        clf = LinearStub(rng.normal(size=(4, 3)), rng.normal(size=3))
        x = rng.random(4)
        target = int((clf.predict(x)[0] + 1 + rng.integers(2)) % 3)
        xs, flips, ok, hist = attacks.greedy_batch(clf, x[None, :], [target], 4)
        ex, seq, ok2 = exhaustive_greedy(clf, x, target, 4)
        assert hist[0] == seq
        assert bool(ok[0]) == ok2
        np.testing.assert_array_equal(xs[0], ex)


def test_greedy_single_flip_stub():
    clf = LinearStub([[0.0, 0.0], [-1.0, 1.0]], [0.2, 0.0])
    res = attacks.greedy_targeted(clf, [0.5, 0.0], 1, 2)
    assert res.feasible and res.perturbation_l0 == 1 and res.target_label == 1


def test_greedy_stops_without_descent():
    stub = GradStub([0.0, 0.0], [0.7, 0.3])
    res = attacks.greedy_targeted(stub, [0.5, 0.5], 1, 2)
    assert not res.feasible and res.perturbation_l0 == 0


def test_greedy_one_gradient_per_iteration():
    clf = LinearStub([[0.1, -0.1], [0.1, -0.1], [0.1, -0.1]], [2.0, 0.0])
    attacks.greedy_targeted(clf, [0.5, 0.5, 0.5], 1, 3)
    assert clf.calls == 4  # three flips, one final check


def test_greedy_rejects_bad_targets():
    clf = LinearStub(np.ones((2, 3)), null_index=2)
    with pytest.raises(ValueError):
        attacks.greedy_targeted(clf, [0.1, 0.1], 3, 1)
    with pytest.raises(ValueError):
        attacks.greedy_targeted(clf, [0.1, 0.1], 2, 1)


# -- stg -------------------------------------------------------------------------

def test_stg_hand_example():
    stub = GradStub([-2.0, 1.0, -0.5], [0.2, 0.3, 0.5], null_index=2)
    np.testing.assert_array_equal(attacks.stg(stub, [0.3, 0.3, 0.9], 1), [1.0, 0.3, 0.9])


def test_stg_target_vector():
    t = attacks.soft_uniform_target(11, 10)
    np.testing.assert_allclose(t, [0.1] * 10 + [0.0])


def test_stg_full_budget_binarizes():
    clf = LinearStub(np.random.default_rng(0).normal(size=(5, 4)), null_index=3)
    out = attacks.stg(clf, np.random.default_rng(1).random(5), 5)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_stg_needs_null_slot_and_valid_count():
    with pytest.raises(ValueError):
        attacks.stg(GradStub([1.0], [0.5, 0.5]), [0.5], 1)
    with pytest.raises(ValueError):
        attacks.stg(GradStub([1.0, 1.0], [0.5, 0.5], null_index=1), [0.5, 0.5], 3)


# -- CSV -------------------------------------------------------------------------

def test_results_csv_round_trip(tmp_path):
    clf = LinearStub(np.random.default_rng(0).normal(size=(4, 3)))
    X = np.random.default_rng(1).random((5, 4))
    y = clf.predict(X)
    Xs = attacks.grad0_batch(clf, X, y, 2)
    res = attacks.results_from_batch(clf, X, Xs, y, L0, 0.5, targets=(y + 1) % 3,
                                     sample_ids=np.arange(10, 15))
    path = tmp_path / "r.csv"
    attacks.write_results_csv(res, path)
    back = attacks.read_results_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:8] == ["sample_id", "original_label", "achieved_label", "norm", "epsilon",
                          "perturbation_l0", "perturbation_linf", "feasible"]
    for a, b in zip(res, back):
        assert a.sample_id == b.sample_id and a.target_label == b.target_label
        assert a.x_star.tobytes() == b.x_star.tobytes()
        assert (a.feasible, a.achieved_label, a.epsilon) == (b.feasible, b.achieved_label, b.epsilon)


# -- properties ------------------------------------------------------------------

def random_linear(seed, d, k, null=False):
    rng = np.random.default_rng(seed)
    return LinearStub(rng.normal(size=(d, k)), rng.normal(size=k),
                      null_index=k - 1 if null else None), rng


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 12), eps=st.floats(0.0, 1.0))
def test_l0_ops_only_touch_budgeted_extremes(seed, d, eps):
    clf, rng = random_linear(seed, d, 4, null=True)
    x = rng.random(d)
    k = AttackBudget(L0, eps).features(d)
    y = int(rng.integers(3))
    outs = [attacks.grad0_batch(clf, x, [y], k)[0]]
    if k:
        outs.append(attacks.mg_batch(clf, x, [y], k)[0][0])
        outs.append(attacks.greedy_batch(clf, x, [(y + 1) % 3], k)[0][0])
        outs.append(attacks.stg_batch(clf, x, k)[0])
    for out in outs:
        changed = out != x
        assert changed.sum() <= k
        assert np.all(np.isin(out[changed], (0.0, 1.0)))
        assert np.all((out >= 0) & (out <= 1))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 12), eps=st.floats(0.0, 1.0))
def test_fgs_stays_in_box(seed, d, eps):
    clf, rng = random_linear(seed, d, 3)
    x = rng.random(d)
    out = attacks.fgs_batch(clf, x, [0], eps)[0]
    assert np.max(np.abs(out - x)) <= eps + 1e-12
    assert np.all((out >= 0) & (out <= 1))
    g = clf.probs_and_input_gradient(x[None, :], onehot(0, 3)[None, :])[1][0]
    free = (g != 0) & (x + eps * np.sign(g) >= 0) & (x + eps * np.sign(g) <= 1)
    np.testing.assert_allclose(np.abs(out - x)[free], eps, rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(2, 8))
def test_grad0_maximizes_linear_gain_exhaustively(seed, d):
    clf, rng = random_linear(seed, d, 3)
    x = rng.random(d)
    g = clf.probs_and_input_gradient(x[None, :], onehot(1, 3)[None, :])[1][0]
    for k in range(1, d + 1):
        out = attacks.grad0_batch(clf, x, [1], k)[0]
        best = max(
            max(attacks.linearized_gain(g, x, np.where(np.isin(np.arange(d), s), ext, x))
                for ext in (np.asarray(e) for e in itertools.product((0.0, 1.0), repeat=d)))
            for s in itertools.combinations(range(d), k)) if d <= 5 else None
        gain = attacks.linearized_gain(g, x, out)
        if best is not None:
            assert gain >= best - 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 10))
def test_greedy_ops_never_flip_twice(seed, d):
    clf, rng = random_linear(seed, d, 3)
    x = rng.random(d)
    _, _, _, hist = attacks.mg_batch(clf, x, [0], d)
    assert len(hist[0]) == len(set(hist[0]))
    _, _, _, hist = attacks.greedy_batch(clf, x, [2], d)
    assert len(hist[0]) == len(set(hist[0]))


def test_attacks_are_deterministic():
    clf, rng = random_linear(5, 10, 4, null=True)
    X = rng.random((6, 10))
    y = np.array([0, 1, 2, 0, 1, 2])
    for fn in (lambda: attacks.grad0_batch(clf, X, y, 3),
               lambda: attacks.fgs_batch(clf, X, y, 0.1),
               lambda: attacks.mg_batch(clf, X, y, 4)[0],
               lambda: attacks.stg_batch(clf, X, 3)):
        assert fn().tobytes() == fn().tobytes()
