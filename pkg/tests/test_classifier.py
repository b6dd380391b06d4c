import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nocdda import autodiff as ad
from nocdda.classifier import (EmptySelectionWarning, LogProbClampWarning, PseudoLabeledSet, SelectionRule,
                               entropies, entropy, export_hcpl_csv, log_prob_input_grad, make_classifier, predict,
                               select_hcpl, train_supervised, train_unified, unified_loss)
from nocdda.data import gen_gaussian_blobs_shift, gen_two_moons_shift
from nocdda.diffusion import forward_diffuse_batch, make_linear_schedule

from oracles import central_fd, dense_forward, sinusoid

SCHED = make_linear_schedule(1000)


def zero_head(C=3, d=2, seed=0):
    return make_classifier(d, C, 1000, np.random.default_rng(seed), hidden=(8,), zero_last=True)


def random_probs(rng, n, C):
    return rng.dirichlet(np.ones(C), size=n)


def test_zero_head_predicts_uniform():
    clf = zero_head(C=4)
    assert np.allclose(predict(clf, np.array([[3.0, -2.0], [0.0, 1.0]]), 7), 0.25, rtol=0, atol=1e-15)


def test_time_changes_prediction():
    clf = make_classifier(2, 3, 1000, np.random.default_rng(1))
    x = np.array([0.4, -0.3])
    assert not np.allclose(predict(clf, x, 0), predict(clf, x, 1000))


def test_separable_blobs_are_learned():
    b = gen_gaussian_blobs_shift(C=2, seed=0, n_per_class=100)
    clf = make_classifier(2, 2, 1000, np.random.default_rng(0))
    train_supervised(clf, b.source_train.X, b.source_train.y, 30, 16, 0.02, np.random.default_rng(1))
    acc = np.mean(predict(clf, b.source_train.X).argmax(1) == b.source_train.y)
    assert acc >= 0.99


@pytest.mark.parametrize("p,expected", [([0, 1, 0], 0.0), ([0.1] * 10, np.log(10)), ([0.5, 0.5, 0, 0], np.log(2))])
def test_entropy_examples(p, expected):
    assert entropy(p) == pytest.approx(expected, abs=1e-12)


def test_entropy_rejects_non_distributions():
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy([1.2, -0.2])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_entropy_permutation_invariant_and_bounded_by_uniform(seed, C):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 1, C)[0]
    assert entropy(p) == pytest.approx(entropy(rng.permutation(p)), abs=1e-12)
    assert 0 <= entropy(p) <= np.log(C) + 1e-12
    if np.max(np.abs(p - 1 / C)) > 1e-3:
        assert entropy(p) < np.log(C)


def _pool(seed, n=200):
    rng = np.random.default_rng(seed)
    clf = make_classifier(2, 3, 1000, rng, hidden=(16,))
    return clf, rng.normal(scale=2.0, size=(n, 2))


def test_quantile_one_keeps_everything():
    clf, pool = _pool(0)
    h = select_hcpl(clf, pool, SelectionRule("quantile", 1.0))
    assert sorted(h.indices) == list(range(len(pool)))


def test_quantile_tenth_is_an_order_statistic():
    clf, pool = _pool(1)
    h = select_hcpl(clf, pool, SelectionRule("quantile", 0.1, min_per_class=0))
    assert len(h) == 20
    excluded = np.setdiff1d(np.arange(200), h.indices)
    assert h.pool_entropy[h.indices].max() <= h.pool_entropy[excluded].min()


def test_threshold_rule_and_cutoff():
    clf, pool = _pool(2)
    ent = entropies(predict(clf, pool))
    cut = float(np.median(ent))
    h = select_hcpl(clf, pool, SelectionRule("threshold", cut, min_per_class=0))
    assert set(h.indices) == set(np.flatnonzero(ent <= cut))
    assert np.all(h.entropy <= h.cutoff) and h.cutoff <= cut


def test_members_are_unique_pool_subset_with_pseudo_labels():
    clf, pool = _pool(3)
    h = select_hcpl(clf, pool, SelectionRule("quantile", 0.3))
    assert len(set(h.indices.tolist())) == len(h)
    assert np.array_equal(h.X, pool[h.indices])
    assert np.array_equal(h.labels, predict(clf, pool[h.indices]).argmax(1))
    assert np.all(np.diff(h.entropy) >= 0)


def test_min_per_class_tops_up_missing_classes():
    clf, pool = _pool(4)
    h0 = select_hcpl(clf, pool, SelectionRule("quantile", 0.05, min_per_class=0))
    h = select_hcpl(clf, pool, SelectionRule("quantile", 0.05, min_per_class=3))
    present = set(predict(clf, pool).argmax(1))
    for c in present:
        assert h.census(3)[c] >= min(3, int(np.sum(predict(clf, pool).argmax(1) == c)))
    assert len(h) == len(h0) + len(h.forced)


def test_empty_selection_warns():
    clf, pool = _pool(5)
    with pytest.warns(EmptySelectionWarning):
        h = select_hcpl(clf, pool, SelectionRule("threshold", -1.0))
    assert len(h) == 0 and h.empty_warning


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_selection_invariant_to_pool_order(seed, q):
    clf, pool = _pool(seed, n=60)
    perm = np.random.default_rng(seed + 1).permutation(len(pool))
    a = select_hcpl(clf, pool, SelectionRule("quantile", q, 0))
    b = select_hcpl(clf, pool[perm], SelectionRule("quantile", q, 0))
    ent = a.pool_entropy
    if len(np.unique(ent)) == len(ent):
        assert set(map(tuple, a.X)) == set(map(tuple, b.X))


def test_selected_mean_entropy_below_pool_on_shifted_moons():
    b = gen_two_moons_shift(400, 30, 0.1, seed=0)
    clf = make_classifier(2, 2, 1000, np.random.default_rng(0))
    train_supervised(clf, b.source_train.X, b.source_train.y, 40, 32, 0.02, np.random.default_rng(1))
    h = select_hcpl(clf, b.target_train.X, SelectionRule("quantile", 0.3))
    assert h.entropy.mean() < h.pool_entropy.mean()


def test_hcpl_csv_export(tmp_path):
    clf, pool = _pool(6, n=30)
    h = select_hcpl(clf, pool, SelectionRule("quantile", 0.5))
    export_hcpl_csv(h, pool, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "feature_0,feature_1,pseudo_label,entropy,selected"
    assert len(lines) == 31 and sum(l.endswith(",1") for l in lines[1:]) == len(h)


def test_zero_head_initial_loss_is_log_c_per_term():
    clf = zero_head(C=3)
    rng = np.random.default_rng(0)
    xs, xh = rng.normal(size=(8, 2)), rng.normal(size=(5, 2))
    loss, parts, _ = unified_loss(clf, ad.Tape(), xs, rng.integers(0, 3, 8), xh, rng.integers(0, 3, 5), 400,
                                  rng.normal(size=(8, 2)), rng.normal(size=(5, 2)), SCHED)
    assert len(parts) == 4
    for node in parts.values():
        assert float(node.value) == pytest.approx(np.log(3), abs=1e-12)
    assert float(loss.value) == pytest.approx(4 * np.log(3), abs=1e-12)


def test_empty_hcpl_leaves_source_terms():
    clf = zero_head()
    rng = np.random.default_rng(1)
    _, parts, _ = unified_loss(clf, ad.Tape(), rng.normal(size=(4, 2)), np.zeros(4, int), np.zeros((0, 2)),
                               np.zeros(0, int), 10, rng.normal(size=(4, 2)), np.zeros((0, 2)), SCHED)
    assert set(parts) == {"clean_source", "noised_source"}


@pytest.mark.parametrize("mode", ["ce", "mse"])
def test_unified_loss_matches_hand_oracle(mode):
    rng = np.random.default_rng(2)
    clf = make_classifier(2, 3, 1000, rng, hidden=(6,), emb_dim=4)
    xs, ys = rng.normal(size=(5, 2)), rng.integers(0, 3, 5)
    xh, yh = rng.normal(size=(4, 2)), rng.integers(0, 3, 4)
    zs, zh = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
    t = 321
    loss, _, _ = unified_loss(clf, ad.Tape(), xs, ys, xh, yh, t, zs, zh, SCHED, mode)

    def term(x, y, step):
        p = dense_forward(clf.net.layers, np.hstack([x, sinusoid(np.full(len(x), step), 1000, 4)]), "relu", "softmax")
        onehot = np.eye(3)[y]
        if mode == "ce":
            return -np.mean(np.log(p[np.arange(len(y)), y]))
        return np.mean(np.sum((p - onehot) ** 2, axis=1))

    ab = SCHED.alpha_bar(t)
    ref = (term(xs, ys, 0) + term(xh, yh, 0) + term(np.sqrt(ab) * xs + np.sqrt(1 - ab) * zs, ys, t)
           + term(np.sqrt(ab) * xh + np.sqrt(1 - ab) * zh, yh, t))
    assert float(loss.value) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("mode", ["ce", "mse"])
def test_unified_training_keeps_source_accuracy(mode):
    accs = []
    for seed in range(5):
        b = gen_two_moons_shift(400, 30, 0.1, seed=seed)
        rng = np.random.default_rng(seed)
        base = make_classifier(2, 2, 1000, rng)
        train_supervised(base, b.source_train.X, b.source_train.y, 40, 32, 0.02, rng)
        h = select_hcpl(base, b.target_train.X, SelectionRule("quantile", 30 / len(b.target_train)))
        clf = make_classifier(2, 2, 1000, rng)
        train_unified(clf, (b.source_train.X, b.source_train.y), h, SCHED, 300, 32, 0.02, rng, mode=mode)
        accs.append(np.mean(predict(clf, b.source_test.X).argmax(1) == b.source_test.y))
    assert np.median(accs) >= 0.95


def test_zero_head_input_gradient_is_zero():
    g = log_prob_input_grad(zero_head(), np.array([0.3, 0.2]), 50, 1)
    assert np.array_equal(g, np.zeros(2))


@pytest.mark.parametrize("seed", range(10))
def test_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    clf = make_classifier(2, 3, 1000, rng, hidden=(8, 8), activation="tanh")
    x = rng.normal(size=2)
    t, y = int(rng.integers(0, 1001)), int(rng.integers(0, 3))
    g = log_prob_input_grad(clf, x, t, y)
    (fd,) = central_fd(lambda: float(np.log(predict(clf, x, t)[y])), [x])
    assert np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)) < 1e-4


def test_ascent_along_gradient_raises_probability():
    rng = np.random.default_rng(3)
    clf = make_classifier(2, 3, 1000, rng, hidden=(16,))
    x = rng.normal(size=2)
    p = [predict(clf, x, 0)[2]]
    for _ in range(10):
        x = x + 0.01 * log_prob_input_grad(clf, x, 0, 2)
        p.append(predict(clf, x, 0)[2])
    assert all(b > a for a, b in zip(p, p[1:]))


def test_clamped_log_probability_has_zero_gradient():
    clf = make_classifier(2, 2, 1000, np.random.default_rng(0), hidden=(4,))
    w, b = clf.net.layers[-1]
    w[:] = 0.0
    b[:] = [50.0, -50.0]
    with pytest.warns(LogProbClampWarning):
        g, clamped = log_prob_input_grad(clf, np.array([[0.1, 0.2]]), 0, 1, return_clamped=True)
    assert clamped.all() and np.array_equal(g, np.zeros((1, 2)))


def test_batch_input_gradient_matches_rows():
    rng = np.random.default_rng(5)
    clf = make_classifier(2, 3, 1000, rng)
    X = rng.normal(size=(4, 2))
    G = log_prob_input_grad(clf, X, 100, 1)
    for x, g in zip(X, G):
        assert np.allclose(log_prob_input_grad(clf, x, 100, 1), g, rtol=0, atol=1e-15)
