import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import eqsae.probing.suite as suite_mod
from eqsae.dataset import FAMILIES, TaskSpec
from eqsae.probing import (
    CSV_COLUMNS,
    GBTClassifier,
    GBTParams,
    LogRegParams,
    ProbeDataset,
    ProbeError,
    Representation,
    f1_score,
    fit_logreg,
    gbt_probe,
    knn_neighbors,
    knn_predict,
    knn_probe,
    logistic_grad,
    logistic_loss,
    logreg_probe,
    orbit_split,
    presort,
    reference_tree,
    run_task_suite,
    select_top_latents,
)
from eqsae.probing.gbt import _sigmoid


def _split(n, seed=0, frac=0.75):
    perm = np.random.default_rng(seed).permutation(n)
    k = int(frac * n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def _blobs(n=200, d=5, seed=0, gap=10.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2 == 0
    x = rng.normal(size=(n, d))
    x[y] += gap / 2
    x[~y] -= gap / 2
    return x, y


def _xor(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    return x, (x[:, 0] > 0) ^ (x[:, 1] > 0)


# -- f1 -----------------------------------------------------------------------------------


def test_f1_examples():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_score([0, 0, 0], [1, 0, 1]) == 0.0
    assert f1_score([0, 0], [0, 0]) == 0.0
    # TP=2, FP=1, FN=1
    assert f1_score([1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)


def test_f1_length_mismatch():
    with pytest.raises(ProbeError):
        f1_score([1, 0], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40), st.integers(0, 2**31 - 1))
def test_f1_permutation_invariant(pairs, seed):
    pred, true = map(np.array, zip(*pairs))
    perm = np.random.default_rng(seed).permutation(len(pairs))
    assert f1_score(pred[perm], true[perm]) == f1_score(pred, true)


# -- truncation ----------------------------------------------------------------------------


def test_select_indicator_latent_ranks_first():
    y = np.array([1, 1, 0, 0, 0], dtype=bool)
    z = np.random.default_rng(0).uniform(0, 0.1, size=(5, 4))
    z[:, 2] = y
    assert select_top_latents(z, y, 1).tolist() == [2]


def test_select_all_tie_returns_first_indices():
    y = np.array([1, 0, 1, 0], dtype=bool)
    assert select_top_latents(np.ones((4, 6)), y, 3).tolist() == [0, 1, 2]


def test_select_hand_computed_scores():
    # class-mean gaps (0.5, 0.9, 0.1)
    y = np.array([1, 1, 0, 0], dtype=bool)
    z = np.array([[0.5, 0.9, 0.1], [0.5, 0.9, 0.1], [0, 0, 0], [0, 0, 0]])
    assert select_top_latents(z, y, 2).tolist() == [1, 0]


def test_select_errors():
    with pytest.raises(ProbeError):
        select_top_latents(np.ones((3, 2)), np.ones(3, dtype=bool), 1)
    with pytest.raises(ProbeError):
        select_top_latents(np.ones((2, 2)), np.array([1, 0], dtype=bool), 3)


# -- datasets ------------------------------------------------------------------------------


def test_probe_dataset_validation():
    with pytest.raises(ProbeError):
        ProbeDataset(np.zeros((4, 1)), np.zeros(4), np.array([0, 1]), np.array([1, 2]))
    with pytest.raises(ProbeError):
        ProbeDataset(np.zeros((4, 1)), np.zeros(4), np.array([0, 1]), np.array([], dtype=int))


def test_orbit_split_keeps_orbits_together():
    train, test = orbit_split(100, seed=3)
    assert len(np.intersect1d(train, test)) == 0
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(400))
    assert len(train) == 300
    assert set(train // 4).isdisjoint(set(test // 4))
    again = orbit_split(100, seed=3)
    assert np.array_equal(again[0], train) and np.array_equal(again[1], test)


# -- kNN -----------------------------------------------------------------------------------


def test_knn_cluster_of_positives():
    x_train = np.concatenate([np.zeros((16, 2)), np.full((16, 2), 5.0)])
    y_train = np.array([True] * 16 + [False] * 16)
    neigh = knn_neighbors(x_train, np.zeros((1, 2)))
    assert knn_predict(neigh, y_train).tolist() == [True]


def test_knn_tie_goes_positive():
    neigh = np.arange(16)[None, :]
    y = np.array([True] * 8 + [False] * 8)
    assert knn_predict(neigh, y).tolist() == [True]
    y[0] = False
    assert knn_predict(neigh, y).tolist() == [False]


def test_knn_all_negative_training():
    x, y = _blobs()
    train, test = _split(200)
    y_all_neg = y.copy()
    y_all_neg[train] = False
    assert knn_probe(ProbeDataset(x, y_all_neg, train, test)) == 0.0


def test_knn_separable_blobs():
    x, y = _blobs()
    train, test = _split(200)
    assert knn_probe(ProbeDataset(x, y, train, test)) == 1.0


def test_knn_needs_sixteen_points():
    with pytest.raises(ProbeError):
        knn_neighbors(np.zeros((10, 2)), np.zeros((1, 2)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_knn_invariant_under_orthogonal_transform(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(120, 6))
    y = x[:, 0] + 0.5 * rng.normal(size=120) > 0
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    train, test = _split(120, seed)
    a = knn_predict(knn_neighbors(x[train], x[test]), y[train])
    b = knn_predict(knn_neighbors(x[train] @ q, x[test] @ q), y[train])
    assert np.array_equal(a, b)


# -- logistic regression ---------------------------------------------------------------------


def test_logreg_default_hyperparameters():
    p = LogRegParams()
    assert (p.learning_rate, p.l2, p.epochs, p.batch_size) == (1e-3, 1e-4, 200, 64)


def test_logreg_one_dimensional_separable():
    x = np.where(np.arange(200) % 2 == 0, 1.0, -1.0)[:, None]
    y = x[:, 0] > 0
    train, test = _split(200)
    assert logreg_probe(ProbeDataset(x, y, train, test), seed=0) == 1.0


def test_logreg_separable_blobs():
    x, y = _blobs()
    train, test = _split(200)
    assert logreg_probe(ProbeDataset(x, y, train, test), seed=1) == 1.0


def test_logreg_zero_variance_features_give_constant_predictions():
    y = np.arange(100) % 3 == 0
    train, test = _split(100)
    w, b = fit_logreg(np.zeros((len(train), 3)), y[train], LogRegParams(epochs=20), seed=0)
    assert np.array_equal(w, np.zeros(3))
    # minority positives drive the bias negative: every prediction is negative
    assert b < 0
    assert logreg_probe(ProbeDataset(np.zeros((100, 3)), y, train, test)) == 0.0


def test_logreg_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(30, 4)), (rng.random(30) > 0.5).astype(float)
    w, b, l2 = rng.normal(size=4), 0.3, 1e-4
    gw, gb = logistic_grad(w, b, X, y, l2)
    eps = 1e-6
    num = np.array([(logistic_loss(w + eps * e, b, X, y, l2) - logistic_loss(w - eps * e, b, X, y, l2)) / (2 * eps)
                    for e in np.eye(4)])
    assert np.allclose(gw, num, rtol=1e-6, atol=1e-9)
    assert gb == pytest.approx((logistic_loss(w, b + eps, X, y, l2) - logistic_loss(w, b - eps, X, y, l2)) / (2 * eps),
                               rel=1e-6)


def test_logreg_rejects_single_class():
    with pytest.raises(ProbeError):
        logreg_probe(ProbeDataset(np.ones((8, 1)), np.ones(8), np.arange(6), np.arange(6, 8)))


def test_logreg_deterministic_given_seed():
    x, y = _xor()
    a = fit_logreg(x, y, LogRegParams(epochs=5), seed=3)
    b = fit_logreg(x, y, LogRegParams(epochs=5), seed=3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


# -- boosted trees ---------------------------------------------------------------------------


def test_gbt_defaults():
    p = GBTParams()
    assert (p.n_rounds, p.max_depth, p.learning_rate, p.reg_lambda, p.gamma, p.min_child_weight) == \
        (100, 6, 0.3, 1.0, 0.0, 1.0)


def test_gbt_threshold_concept():
    x = np.random.default_rng(0).normal(size=(200, 1))
    y = x[:, 0] > 0
    train, test = _split(200)
    assert gbt_probe(ProbeDataset(x, y, train, test)) == 1.0


def test_gbt_constant_positive_labels():
    x = np.random.default_rng(0).normal(size=(40, 2))
    train, test = _split(40)
    assert gbt_probe(ProbeDataset(x, np.ones(40, dtype=bool), train, test)) == 1.0


def test_gbt_separable_blobs():
    x, y = _blobs()
    train, test = _split(200)
    assert gbt_probe(ProbeDataset(x, y, train, test)) == 1.0


def test_gbt_xor():
    x, y = _xor()
    train, test = _split(400)
    assert gbt_probe(ProbeDataset(x, y, train, test)) >= 0.95


def test_gbt_matches_reference_on_xor_depth_two():
    # replay boosting with the slow oracle and compare every tree
    x, y = _xor(120, seed=5)
    params = GBTParams(n_rounds=10, max_depth=2)
    clf = GBTClassifier(params).fit(x, y)
    margin = np.zeros(len(y))
    for tree in clf.trees:
        prob = _sigmoid(margin)
        ref = reference_tree(x, prob - y, prob * (1 - prob), params)
        assert np.array_equal(tree.feature, ref.feature)
        assert np.allclose(tree.threshold, ref.threshold, rtol=0, atol=1e-12)
        assert np.allclose(tree.value, ref.value, rtol=1e-9, atol=1e-12)
        assert tree.depth() <= 2
        margin += GBTClassifier(params, [ref]).decision_function(x)


@pytest.mark.parametrize("seed", range(3))
def test_gbt_matches_reference_on_random_data(seed):
    rng = np.random.default_rng(seed)
    x = np.round(rng.normal(size=(80, 4)), 1)  # rounding creates duplicate values
    g, h = rng.normal(size=80), rng.uniform(0.05, 0.25, size=80)
    params = GBTParams(max_depth=3)
    clf = GBTClassifier(params)
    order, xs = presort(x)
    from eqsae.probing.gbt import _grow_tree

    margin = np.zeros(80)
    arrays = _grow_tree(order, xs, g, h, 3, 1.0, 0.0, 1.0, 0.3, margin,
                        np.empty((2,) + order.shape, dtype=order.dtype), np.empty((2,) + xs.shape))
    ref = reference_tree(x, g, h, params)
    assert np.array_equal(arrays[0], ref.feature)
    assert np.allclose(arrays[4], ref.value, rtol=1e-9, atol=1e-12)
    clf.trees = [ref]
    assert np.allclose(margin, clf.decision_function(x), rtol=1e-9, atol=1e-12)


def test_gbt_presorted_equals_plain_fit():
    x, y = _blobs(n=64, d=3, gap=1.0)
    a = GBTClassifier(GBTParams(n_rounds=5)).fit(x, y).decision_function(x)
    b = GBTClassifier(GBTParams(n_rounds=5)).fit(x, y, presorted=presort(x)).decision_function(x)
    assert np.array_equal(a, b)


# -- suite ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def suite_inputs():
    rng = np.random.default_rng(0)
    n_orbits, n_latents = 40, 24
    labels = rng.random((n_orbits * 4, 3)) < 0.4
    labels[:, 2] = False  # a task with no positives fails and must be isolated
    latents = np.where(rng.random((n_orbits * 4, n_latents)) < 0.3, rng.random((n_orbits * 4, n_latents)), 0.0)
    latents[:, 0] = labels[:, 0] * 2.0
    latents[:, 1] = labels[:, 1] * 2.0
    W, b = rng.normal(size=(8, n_latents)), rng.normal(size=8)
    acts = latents @ W.T + b
    reps = [
        Representation("activations", features=acts),
        Representation("latents_truncated", "regular", 8, latents=latents, decoder_weight=W, decoder_bias=b),
        Representation("reconstruction_truncated", "regular", 8, latents=latents, decoder_weight=W, decoder_bias=b),
    ]
    tasks = [TaskSpec("S", 0), TaskSpec("SP", 1, position=2), TaskSpec("SO", 3, orientation=1)]
    train, test = orbit_split(n_orbits, seed=1)
    return reps, labels, tasks, train, test


def _run(inputs, **kw):
    reps, labels, tasks, train, test = inputs
    return run_task_suite(reps, labels, tasks, train, test, L=4, seed=5, gbt_params=GBTParams(n_rounds=10), **kw)


def test_suite_structure_and_isolation(suite_inputs):
    out = _run(suite_inputs)
    assert len(out.results) == 3 * 3 * 3
    best = out.best()
    assert len(best) == 9
    failed = [r for r in out.results if r.error]
    assert {r.task.family for r in failed} == {"SO"}
    assert all(r.f1 == 0.0 for r in failed)
    assert {r.trunc_len for r in out.results if r.representation == "activations"} == {None}
    # latent 0 indicates the S task exactly, so truncated probes are perfect
    ok = [r for r in best if r.task.family == "S" and r.representation != "activations"]
    assert len(ok) == 2 and all(r.f1 == 1.0 for r in ok)


def test_suite_best_flag_is_max_with_earliest_tie(suite_inputs):
    out = _run(suite_inputs)
    for i in range(0, len(out.results), 3):
        group = out.results[i:i + 3]
        f1s = [r.f1 for r in group]
        assert [r.best for r in group].index(True) == f1s.index(max(f1s))


def test_suite_aggregate_table(suite_inputs):
    agg = _run(suite_inputs).aggregate()
    assert set(agg) == {("activations", ""), ("latents_truncated", "regular"), ("reconstruction_truncated", "regular")}
    for key, fams in agg.items():
        assert set(fams) == set(FAMILIES) | {"ALL"}
        assert np.isnan(fams["SPO"])
        if key[0] != "activations":
            assert fams["S"] == 1.0


def test_suite_csv(suite_inputs):
    text = _run(suite_inputs).to_csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 27
    assert {r["trunc_len"] for r in rows} == {"", "4"}


def test_suite_deterministic(suite_inputs):
    assert _run(suite_inputs).to_csv() == _run(suite_inputs).to_csv()


def test_suite_truncation_sees_training_rows_only(suite_inputs, monkeypatch):
    reps, labels, tasks, train, test = suite_inputs
    seen = []
    real = suite_mod.select_top_latents

    def spy(latents_train, labels_train, L):
        seen.append(latents_train.shape[0])
        return real(latents_train, labels_train, L)

    monkeypatch.setattr(suite_mod, "select_top_latents", spy)
    _run(suite_inputs)
    assert seen and set(seen) == {len(train)}


def test_reconstruction_representation_decodes_masked_latents():
    rng = np.random.default_rng(1)
    z, W, b = rng.random((5, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
    sel = np.array([4, 1])
    rep = Representation("reconstruction_truncated", "regular", 8, latents=z, decoder_weight=W, decoder_bias=b)
    masked = np.zeros_like(z)
    masked[:, sel] = z[:, sel]
    assert np.allclose(rep.build(sel), masked @ W.T + b)
    M = rng.normal(size=(3, 3))
    powers = np.array([0, 1, 2, 3, 1])
    eq = Representation("reconstruction_truncated", "invariant", 8, latents=z, decoder_weight=W, decoder_bias=b,
                        M=M, powers=powers)
    got = eq.build(sel)
    for i, p in enumerate(powers):
        assert np.allclose(got[i], np.linalg.matrix_power(M, p) @ (masked[i] @ W.T + b))
    assert np.array_equal(Representation("latents_truncated", latents=z).build(sel), z[:, sel])
