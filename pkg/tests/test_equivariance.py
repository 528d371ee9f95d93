import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqsae.equivariance import (
    FitError,
    apply_powers,
    classify_dictionary_features,
    equivariant_reconstruct,
    evaluate_m,
    fit_m,
    infer_power,
    load_m,
    matrix_power,
    orbit_loss,
    predict_transformed,
    r_squared,
    save_m,
)
from eqsae.numerics import Precision
from eqsae.sae import build_sae, reconstruct


def _order4_rotation(d, seed):
    rng = np.random.default_rng(seed)
    blocks = np.zeros((d, d))
    for i in range(0, d, 2):
        blocks[i:i + 2, i:i + 2] = [[0, -1], [1, 0]]
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q @ blocks @ q.T


def _orbits(R, n, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, R.shape[0]))
    out = np.stack([x @ np.linalg.matrix_power(R, p).T for p in range(4)], axis=1)
    return out + noise * rng.normal(size=out.shape)


def _constant_sae(c):
    """SAE whose reconstruction is the constant vector ``c`` for every input."""
    d = c.shape[0]
    sae = build_sae("regular", 1, seed=0, act_dim=d, n_latents=2, precision=Precision.DOUBLE)
    sae.params["enc1.weight"].data[:] = 0
    sae.params["enc1.bias"].data[:] = 0
    sae.params["dec.weight"].data[:] = 0
    sae.params["dec.bias"].data[:] = c
    return sae


# -- r_squared ------------------------------------------------------------------------


def test_r_squared_examples():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(20, 5))
    assert r_squared(truth, truth) == 1.0
    assert r_squared(np.broadcast_to(truth.mean(axis=0), truth.shape), truth) == pytest.approx(0.0, abs=1e-12)


def test_r_squared_two_pass_oracle():
    rng = np.random.default_rng(1)
    truth, pred = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    ss_res = ss_tot = 0.0
    for j in range(4):
        mean = sum(truth[i, j] for i in range(7)) / 7
        for i in range(7):
            ss_res += (pred[i, j] - truth[i, j]) ** 2
            ss_tot += (truth[i, j] - mean) ** 2
    assert abs(r_squared(pred, truth) - (1 - ss_res / ss_tot)) < 1e-10


def test_r_squared_errors():
    with pytest.raises(ValueError):
        r_squared(np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        r_squared(np.ones((3, 2)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        r_squared(np.ones((1, 2)), np.zeros((1, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_r_squared_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    perm = rng.permutation(9)
    assert r_squared(pred[perm], truth[perm]) == pytest.approx(r_squared(pred, truth), rel=1e-12, abs=1e-12)


# -- powers ---------------------------------------------------------------------------


def test_predict_transformed_examples():
    rng = np.random.default_rng(2)
    M, x = rng.normal(size=(4, 4)), rng.normal(size=(5, 4))
    assert np.array_equal(predict_transformed(M, x, 0), x)
    for p in range(4):
        assert np.array_equal(predict_transformed(np.eye(4), x, p), x)
    assert np.allclose(predict_transformed(M, x, 2), x @ (M @ M).T, atol=1e-12)
    with pytest.raises(ValueError):
        predict_transformed(M, x, -1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_predict_transformed_semigroup(a, b, seed):
    if a + b > 3:
        return
    rng = np.random.default_rng(seed)
    M, x = rng.normal(size=(3, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(predict_transformed(M, predict_transformed(M, x, a), b), predict_transformed(M, x, a + b))


def test_matrix_power_and_apply_powers():
    rng = np.random.default_rng(3)
    M, rows = rng.normal(size=(3, 3)), rng.normal(size=(4, 3))
    assert np.allclose(matrix_power(M, 3), M @ M @ M)
    assert np.array_equal(matrix_power(M, 0), np.eye(3))
    powers = np.array([0, 1, 2, 3])
    out = apply_powers(M, rows, powers)
    for i, p in enumerate(powers):
        assert np.allclose(out[i], np.linalg.matrix_power(M, p) @ rows[i])


# -- fitting --------------------------------------------------------------------------


def test_identity_is_exact_for_invariant_model():
    x = np.random.default_rng(4).normal(size=(10, 6))
    orbits = np.repeat(x[:, None], 4, axis=1)
    assert orbit_loss(np.eye(6), orbits) == 0.0


def test_orbit_loss_numpy_oracle():
    rng = np.random.default_rng(5)
    M, orbits = rng.normal(size=(3, 3)), rng.normal(size=(6, 4, 3))
    want = sum(np.mean((orbits[:, 0] @ np.linalg.matrix_power(M, p).T - orbits[:, p % 4]) ** 2) for p in range(1, 5))
    assert orbit_loss(M, orbits) == pytest.approx(want, rel=1e-10)


@pytest.fixture(scope="module")
def fitted():
    R = _order4_rotation(8, seed=0)
    train, held_out = _orbits(R, 256, seed=1, noise=0.01), _orbits(R, 64, seed=2)
    M, report = fit_m(train, epochs=60, lr=1e-2, batch_size=32, seed=0, eval_orbits=held_out,
                      precision=Precision.DOUBLE)
    return R, M, report


def test_fit_recovers_rotation(fitted):
    R, M, report = fitted
    assert report.r2_mean > 0.99
    assert len(report.r2_per_power) == 3
    assert report.r2_mean == pytest.approx(np.mean(report.r2_per_power))
    assert report.r2_mean - report.identity_baseline_r2 > 0.3
    assert report.r2_closure > 0.99
    assert np.allclose(M, R, atol=0.05)


def test_fit_loss_trend(fitted):
    hist = fitted[2].loss_history
    assert len(hist) == 60
    # epoch means decrease overall; a rise above the previous epoch stays within a small noise band
    assert hist[-1] < 0.05 * hist[0]
    band = 0.05 * hist[0]
    assert all(b <= a + band for a, b in zip(hist, hist[1:]))


def test_fit_is_deterministic():
    R = _order4_rotation(4, seed=3)
    orbits = _orbits(R, 32, seed=4)
    a, ra = fit_m(orbits, epochs=3, seed=7)
    b, rb = fit_m(orbits, epochs=3, seed=7)
    assert np.array_equal(a, b) and ra.loss_history == rb.loss_history


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_m(np.zeros((4, 3, 2)))
    bad = np.ones((4, 4, 2))
    bad[0, 1, 0] = np.inf
    with pytest.raises(FitError):
        fit_m(bad, epochs=1)


def test_evaluate_identity_baseline_on_invariant_data():
    x = np.random.default_rng(6).normal(size=(10, 4))
    ev = evaluate_m(np.eye(4), np.repeat(x[:, None], 4, axis=1))
    assert ev["identity_r2_per_power"] == [1.0, 1.0, 1.0]


def test_m_roundtrip(tmp_path, fitted):
    _, M, report = fitted
    save_m(tmp_path, M, report)
    M2, rep2 = load_m(tmp_path)
    assert np.array_equal(M2, M) and rep2 == report


# -- equivariant reconstruction ---------------------------------------------------------


def test_identity_m_gives_plain_reconstruction():
    sae = build_sae("regular", 2, seed=0, act_dim=6, n_latents=12, precision=Precision.DOUBLE)
    x = np.random.default_rng(7).normal(size=(5, 6))
    recon, powers = equivariant_reconstruct(sae, np.eye(6), x)
    assert np.array_equal(recon, reconstruct(sae, x))
    assert (powers == 0).all()
    single, p = equivariant_reconstruct(sae, np.eye(6), x[0])
    assert p == 0 and np.allclose(single, recon[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("p", [0, 1, 2, 3])
def test_planted_power_is_recovered(p):
    R = _order4_rotation(6, seed=8)
    c = np.random.default_rng(9).normal(size=6)
    act = np.linalg.matrix_power(R, p) @ c
    recon, got = equivariant_reconstruct(_constant_sae(c), R, act)
    assert got == p
    assert np.allclose(recon, act)


def test_supplied_powers_are_used():
    R = _order4_rotation(4, seed=10)
    c = np.ones(4)
    recon, powers = equivariant_reconstruct(_constant_sae(c), R, np.tile(c, (2, 1)), powers=np.array([1, 3]))
    assert powers.tolist() == [1, 3]
    assert np.allclose(recon[1], np.linalg.matrix_power(R, 3) @ c)


def test_infer_power_ties_prefer_smallest():
    c = np.ones((1, 3))
    assert infer_power(np.eye(3), c, c).tolist() == [0]
    # M = -I: powers 0 and 2 both reproduce c exactly
    assert infer_power(-np.eye(3), c, c).tolist() == [0]


# -- dictionary features ----------------------------------------------------------------


def test_classify_planted_directions():
    R = np.diag([1.0, -1.0, 1.0])
    D = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]])
    out = classify_dictionary_features(D, R)
    assert out.similarity[0] == 1.0
    assert out.similarity[1] == -1.0
    assert out.labels == ["invariant", "equivariant", "dead"]
    assert out.counts() == {"invariant": 1, "equivariant": 1, "dead": 1}


def test_classify_respects_alive_mask_and_threshold():
    M = _order4_rotation(4, seed=11)
    D = np.random.default_rng(12).normal(size=(4, 5))
    out = classify_dictionary_features(D, M, threshold=-2.0, alive=np.array([1, 1, 0, 1, 1]))
    assert out.labels == ["invariant", "invariant", "dead", "invariant", "invariant"]
    edges, counts = out.histogram(bins=4)[1], out.histogram(bins=4)[0]
    assert counts.sum() == 4 and edges[0] == -1.0 and edges[-1] == 1.0
