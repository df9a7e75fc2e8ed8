import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectra_invar.baselines import (DegenerateDataError, PlsModel, load_checkpoint, mean_spectra, pls_fit,
                                     predictor_only_train)
from spectra_invar.lisa import LisaConfig, init_params
from spectra_invar.metrics import r_squared


def test_exact_linear_recovery():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    y = x @ rng.normal(size=(6, 2)) + 3.0
    m = pls_fit(x, y, k=6)
    for j in range(2):
        assert r_squared(y[:, j], m.predict(x)[:, j]) == pytest.approx(1.0, abs=1e-6)


def test_one_feature_matches_ols_slope():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 1))
    y = 2.5 * x[:, 0] - 1.0 + rng.normal(scale=0.3, size=30)
    m = pls_fit(x, y, k=1)
    slope = np.cov(x[:, 0], y, bias=True)[0, 1] / np.var(x[:, 0])
    assert m.coef[0, 0] == pytest.approx(slope, rel=1e-10)
    assert m.predict(np.zeros((1, 1)))[0, 0] == pytest.approx(y.mean() - slope * x.mean(), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_full_rank_equals_ols(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, d))
    y = rng.normal(size=(25, 2))
    m = pls_fit(x, y, k=d)
    xa = np.hstack([x, np.ones((25, 1))])
    beta, *_ = np.linalg.lstsq(xa, y, rcond=None)
    np.testing.assert_allclose(m.predict(x), xa @ beta, atol=1e-6)


def test_prediction_is_affine():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 8))
    m = pls_fit(x, rng.normal(size=30), k=3)
    a, b = rng.normal(size=(2, 8))
    np.testing.assert_allclose(m.predict(0.3 * a + 0.7 * b), 0.3 * m.predict(a) + 0.7 * m.predict(b), atol=1e-12)


def test_permuted_labels_do_not_generalise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 20))
    y = x[:, 0] + 0.1 * rng.normal(size=400)
    yp = rng.permutation(y)
    m = pls_fit(x[:300], yp[:300], k=3)
    assert r_squared(yp[300:], m.predict(x[300:])[:, 0]) <= 0.1


def test_errors():
    with pytest.raises(DegenerateDataError):
        pls_fit(np.ones((5, 3)), np.arange(5.0), k=1)
    with pytest.raises(ValueError):
        pls_fit(np.zeros((1, 3)), np.zeros(1), k=1)
    with pytest.raises(ValueError):
        pls_fit(np.eye(4), np.arange(4.0), k=0)
    with pytest.raises(ValueError):
        pls_fit(np.eye(4), np.arange(4.0), k=4)
    x = np.eye(4)
    x[0, 0] = np.nan
    with pytest.raises(ValueError):
        pls_fit(x, np.arange(4.0), k=1)


def test_save_load(tmp_path):
    rng = np.random.default_rng(4)
    m = pls_fit(rng.normal(size=(20, 5)), rng.normal(size=(20, 2)), k=3)
    m.save(tmp_path / "pls.ckpt")
    back = PlsModel.load(tmp_path / "pls.ckpt")
    assert back.n_components == 3
    x = rng.normal(size=(4, 5))
    assert np.array_equal(back.predict(x), m.predict(x))
    kind, again = load_checkpoint(tmp_path / "pls.ckpt")
    assert kind == "pls" and np.array_equal(again.coef, m.coef)


def test_mean_spectra():
    x = np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8)
    np.testing.assert_allclose(mean_spectra(x), x.mean(axis=(2, 3)))


def test_predictor_only_shares_head_shapes(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(12, 16, 8, 8)).astype(np.float32)
    brix, acid = rng.uniform(17, 24, 12), rng.uniform(4, 9, 12)
    cfg = LisaConfig(hidden=(8, 6), latent_channels=4, head_hidden=16, disc_hidden=8, epochs=2, batch=4)
    m, hist = predictor_only_train(cfg, x, brix, acid, np.ones(12, bool), ["lab"] * 6 + ["field_am"] * 6)
    assert not m.has_body and m.kind == "predictor"
    assert all(h.recon == h.manifold == h.domain == 0.0 for h in hist)
    full = init_params(cfg, bands=16)
    for name in ("head.brix.1.w", "head.acid.1.w", "head.grape.1.w", "head.brix.0.b"):
        assert m.params[name].shape == full[name].shape
    m.save(tmp_path / "p.ckpt")
    kind, back = load_checkpoint(tmp_path / "p.ckpt")
    assert kind == "predictor"
    assert np.array_equal(back.predict(x)["brix"], m.predict(x)["brix"])
    m2, _ = predictor_only_train(cfg, x, brix, acid, np.ones(12, bool), ["lab"] * 6 + ["field_am"] * 6)
    assert np.array_equal(m2.predict(x)["brix"], m.predict(x)["brix"])
