import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullnet import nn
from nullnet.data import synthetic_blobs
from nullnet.errors import DimensionError, FormatError, NumericError
from nullnet.nn import Classifier, NetworkSpec, conv2d, dense, dropout, maxpool, relu, softmax


def mlp_spec(d=6, h=5, k=3, has_null=False):
    return NetworkSpec((dense(h), relu(), dense(k), softmax()), (1, d, 1), k, has_null)


def small_cnn_spec():
    return NetworkSpec((conv2d(2), relu(), maxpool(), dense(4), relu(), dense(3), softmax()),
                       (6, 6, 1), 3)


def fd_input_grad(clf, x, t, h=1e-4):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (nn.loss(clf, x + e, t) - nn.loss(clf, x - e, t)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# -- forward -------------------------------------------------------------------

def test_zero_weights_give_uniform_output():
    spec = NetworkSpec((dense(3), softmax()), (1, 4, 1), 3)
    clf = Classifier(spec, np.zeros(nn.param_count(spec)))
    np.testing.assert_allclose(nn.forward(clf, [0.1, 0.9, 0.3, 0.0]), [1 / 3] * 3)


def test_permutation_network_on_onehot():
    perm = [2, 0, 3, 1]
    spec = NetworkSpec((dense(4), softmax()), (1, 4, 1), 4)
    clf = Classifier(spec, np.zeros(nn.param_count(spec)))
    W = clf._views(clf.params)[(0, "W")]
    for i, j in enumerate(perm):
        W[i, j] = 5.0
    for i, j in enumerate(perm):
        x = np.zeros(4)
        x[i] = 1.0
        assert nn.predict(clf, x) == j


def test_mlp_matches_straight_line_evaluation():
    clf = Classifier.initialize(mlp_spec(d=4, h=3, k=2), seed=7)
    x = np.array([0.1, 0.5, 0.9, 0.3])
    p = clf.params
    W1, b1 = p[:12].reshape(4, 3), p[12:15]
    W2, b2 = p[15:21].reshape(3, 2), p[21:23]
    hid = [max(0.0, sum(x[i] * W1[i, j] for i in range(4)) + b1[j]) for j in range(3)]
    z = [sum(hid[j] * W2[j, k] for j in range(3)) + b2[k] for k in range(2)]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    expect = [v / sum(e) for v in e]
    np.testing.assert_allclose(nn.forward(clf, x), expect, rtol=1e-12)


def test_forward_shape_mismatch():
    clf = Classifier.initialize(mlp_spec(), 0)
    with pytest.raises(DimensionError):
        nn.forward(clf, np.zeros(5))


def test_broken_specs_rejected():
    with pytest.raises(DimensionError):
        NetworkSpec((dense(3),), (1, 4, 1), 3)
    with pytest.raises(DimensionError):
        NetworkSpec((dense(2), softmax()), (1, 4, 1), 3)
    with pytest.raises(DimensionError):
        NetworkSpec((conv2d(2), dense(2), softmax()), (2, 2, 1), 2)


def test_forward_deterministic_without_dropout():
    spec = NetworkSpec((dense(5), relu(), dropout(0.5), dense(3), softmax()), (1, 6, 1), 3)
    clf = Classifier.initialize(spec, 1)
    x = np.linspace(0, 1, 6)
    a, b = nn.forward(clf, x), nn.forward(clf, x)
    assert np.array_equal(a, b)
    rng = np.random.default_rng(0)
    assert not np.array_equal(a, nn.forward(clf, x, train_mode=True, rng=rng))


def test_paper_profiles_build_and_run():
    for name in ("paper-cnn", "paper-cnn-signs", "desk-mlp"):
        spec = nn.profile(name, 11, has_null=True)
        clf = Classifier.initialize(spec, 0)
        p = clf.probs(np.full((2, 784), 0.5))
        assert p.shape == (2, 11)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert spec.null_index == 10


# -- loss ----------------------------------------------------------------------

def test_uniform_prediction_loss_is_log_k():
    spec = NetworkSpec((dense(10), softmax()), (1, 3, 1), 10)
    clf = Classifier(spec, np.zeros(nn.param_count(spec)))
    assert nn.loss(clf, [0.2, 0.4, 0.6], 4) == pytest.approx(math.log(10))


def test_loss_equals_entropy_when_prediction_matches_target():
    clf = Classifier.initialize(mlp_spec(), 3)
    x = np.linspace(0, 1, 6)
    p = nn.forward(clf, x)
    assert nn.loss(clf, x, p) == pytest.approx(-np.sum(p * np.log(p)))


def test_onehot_soft_target_equals_hard_label_exactly():
    clf = Classifier.initialize(mlp_spec(), 3)
    x = np.linspace(0, 1, 6)
    assert nn.loss(clf, x, np.array([0.0, 1.0, 0.0])) == nn.loss(clf, x, 1)


def test_loss_matches_scalar_recomputation():
    rng = np.random.default_rng(5)
    clf = Classifier.initialize(mlp_spec(), 4)
    x = rng.random(6)
    t = rng.dirichlet(np.ones(3))
    p = nn.forward(clf, x)
    assert nn.loss(clf, x, t) == pytest.approx(sum(-t[i] * math.log(p[i]) for i in range(3)))


def test_non_finite_activations_raise():
    clf = Classifier.initialize(mlp_spec(), 0)
    clf.params[0] = np.inf
    with pytest.raises(NumericError):
        nn.loss(clf, np.ones(6), 0)


def test_bad_targets_rejected():
    clf = Classifier.initialize(mlp_spec(), 0)
    with pytest.raises(ValueError):
        nn.loss(clf, np.ones(6), 3)
    with pytest.raises(ValueError):
        nn.loss(clf, np.ones(6), np.array([0.5, 0.6, 0.1]))


# -- gradients -----------------------------------------------------------------

def test_linear_input_gradient_closed_form():
    rng = np.random.default_rng(2)
    spec = nn.profile("linear", 4, input_shape=(1, 5, 1))
    clf = Classifier.initialize(spec, 2)
    W = clf.params[:20].reshape(5, 4)
    b = clf.params[20:]
    x = rng.random(5)
    z = x @ W + b
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    expect = (p - np.eye(4)[2]) @ W.T
    np.testing.assert_allclose(nn.input_gradient(clf, x, 2), expect, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("spec_fn", [mlp_spec, small_cnn_spec])
def test_input_gradient_matches_finite_differences(spec_fn):
    rng = np.random.default_rng(11)
    clf = Classifier.initialize(spec_fn(), 3)
    x = rng.random(clf.input_dim)
    t = rng.dirichlet(np.ones(clf.class_count))
    assert rel_err(nn.input_gradient(clf, x, t), fd_input_grad(clf, x, t)) < 1e-3


def test_zero_network_has_zero_input_gradient():
    spec = mlp_spec()
    clf = Classifier(spec, np.zeros(nn.param_count(spec)))
    assert not np.any(nn.input_gradient(clf, np.full(6, 0.3), 1))


def test_param_gradient_finite_differences_on_random_coordinates():
    rng = np.random.default_rng(4)
    clf = Classifier.initialize(small_cnn_spec(), 4)
    x = rng.random(clf.input_dim)
    g = nn.param_gradient(clf, [(x, 1)])
    idx = rng.choice(clf.params.size, 20, replace=False)
    fd = np.zeros(20)
    for j, i in enumerate(idx):
        old = clf.params[i]
        clf.params[i] = old + 1e-4
        up = nn.loss(clf, x, 1)
        clf.params[i] = old - 1e-4
        down = nn.loss(clf, x, 1)
        clf.params[i] = old
        fd[j] = (up - down) / 2e-4
    assert rel_err(g[idx], fd) < 1e-3


def test_duplicated_sample_gives_same_mean_gradient():
    clf = Classifier.initialize(mlp_spec(), 1)
    x = np.linspace(0, 1, 6)
    np.testing.assert_allclose(nn.param_gradient(clf, [(x, 2), (x, 2)]),
                               nn.param_gradient(clf, [(x, 2)]), rtol=1e-12)


def test_no_learning_signal_gives_zero_gradient():
    clf = Classifier.initialize(mlp_spec(), 1)
    x = np.linspace(0, 1, 6)
    p = nn.forward(clf, x)
    assert np.linalg.norm(nn.param_gradient(clf, [(x, p)])) < 1e-8


def test_empty_batch_rejected():
    clf = Classifier.initialize(mlp_spec(), 1)
    with pytest.raises(ValueError):
        nn.param_gradient(clf, [])


# -- sgd / predict ---------------------------------------------------------------

def test_sgd_zero_rate_and_unit_step():
    spec = mlp_spec()
    clf = Classifier(spec, np.zeros(nn.param_count(spec)))
    g = np.arange(nn.param_count(spec), dtype=float)
    nn.sgd_step(clf, g, 0.0)
    assert not np.any(clf.params)
    nn.sgd_step(clf, g, 1.0)
    np.testing.assert_array_equal(clf.params, -g)
    with pytest.raises(DimensionError):
        nn.sgd_step(clf, g[:-1], 1.0)


def test_sgd_separates_two_blobs():
    ds = synthetic_blobs(200, 2, 2, 10.0, seed=0)
    clf = Classifier.initialize(nn.profile("linear", 2, input_shape=(1, 2, 1)), 0)
    for _ in range(200):
        nn.sgd_step(clf, nn.param_gradient(clf, (ds.X, ds.y)), 1.0)
    assert np.mean(clf.predict(ds.X) == ds.y) == 1.0


def test_predict_tie_breaks_to_lowest_index():
    assert nn.argmax_label([0.1, 0.7, 0.2]) == 1
    assert nn.argmax_label([0.5, 0.5]) == 0
    assert nn.argmax_label(np.full(10, 0.1)) == 0
    spec = NetworkSpec((dense(10), softmax()), (1, 3, 1), 10)
    assert nn.predict(Classifier(spec, np.zeros(nn.param_count(spec))), np.ones(3)) == 0


# -- NULL head -------------------------------------------------------------------

def test_extra_output_keeps_old_weights():
    clf = Classifier.initialize(mlp_spec(k=3), 0)
    big = clf.with_extra_output()
    assert big.class_count == 4 and big.null_index == 3
    x = np.random.default_rng(0).random((5, 6))
    old = clf.probs(x)
    new = big.probs(x)
    # with a zero NULL logit the valid-class ratios are unchanged
    np.testing.assert_allclose(new[:, :3] / new[:, :3].sum(1, keepdims=True), old, rtol=1e-12)


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    clf = Classifier.initialize(small_cnn_spec(), 9)
    path = tmp_path / "m.ndf"
    nn.save_checkpoint(clf, path)
    back = nn.load_checkpoint(path)
    assert back.spec == clf.spec
    assert back.params.tobytes() == clf.params.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"NDF1"
    nn.save_checkpoint(back, tmp_path / "again.ndf")
    assert (tmp_path / "again.ndf").read_bytes() == raw


def test_checkpoint_format_errors(tmp_path):
    clf = Classifier.initialize(mlp_spec(), 0)
    path = tmp_path / "m.ndf"
    nn.save_checkpoint(clf, path)
    raw = path.read_bytes()
    (tmp_path / "magic.ndf").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ndf").write_bytes(raw[:-8])
    (tmp_path / "header.ndf").write_bytes(raw[:6])
    for name in ("magic.ndf", "short.ndf", "header.ndf"):
        with pytest.raises(FormatError):
            nn.load_checkpoint(tmp_path / name)


# -- properties --------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 6), scale=st.floats(0.01, 50.0))
def test_outputs_are_probability_vectors(seed, k, scale):
    clf = Classifier.initialize(mlp_spec(k=k), seed)
    clf.params *= scale
    x = np.random.default_rng(seed).random((4, 6))
    p = clf.probs(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-20, 20), factor=st.floats(0.05, 20))
def test_predict_invariant_under_monotone_logit_transform(seed, shift, factor):
    clf = Classifier.initialize(mlp_spec(), seed)
    x = np.random.default_rng(seed).random((8, 6))
    before = clf.predict(x)
    head = [s for s in nn.param_layout(clf.spec) if s.layer == 2]
    for s in head:
        clf.params[s.offset:s.offset + s.size] *= factor
        if s.name == "b":
            clf.params[s.offset:s.offset + s.size] += shift
    assert np.array_equal(before, clf.predict(x))
