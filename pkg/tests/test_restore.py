import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dldeblur import imageproc as ip
from dldeblur import restore
from dldeblur.dict_learn import Model
from dldeblur.errors import InvalidInputError
from dldeblur.sparse_coding import lasso_solve


def small_model(seed=0, k=10, lam=0.05, m_s=3, m_b=5):
    rng = np.random.default_rng(seed)
    Db = rng.standard_normal((m_b * m_b, k))
    Db /= np.linalg.norm(Db, axis=0)
    return Model(Db, 0.1 * rng.standard_normal((m_s * m_s, k)),
                 0.05 * rng.standard_normal((m_s * m_s, m_b * m_b)), lam, m_s, m_b)


def center_selector(m_s, m_b):
    """Linear map that copies the central m_s x m_s window of an m_b x m_b patch."""
    W = np.zeros((m_s * m_s, m_b * m_b))
    off = (m_b - m_s) // 2
    for r in range(m_s):
        for c in range(m_s):
            W[r * m_s + c, (r + off) * m_b + c + off] = 1.0
    return W


# -- patch prediction -------------------------------------------------------

def test_predict_patch_composition():
    model = small_model()
    rng = np.random.default_rng(1)
    b, bt = rng.standard_normal(25), rng.standard_normal(25)
    alpha = lasso_solve(b, model.dict_blurry, model.lam).coefficients
    expect = model.linear_predictor @ bt + model.dict_sharp @ alpha
    np.testing.assert_allclose(restore.predict_patch(model, b, bt), expect, rtol=1e-12)


def test_predict_patch_linear_only():
    model = small_model()
    lin = model.linear_only()
    b = np.random.default_rng(2).standard_normal(25)
    assert np.array_equal(restore.predict_patch(lin, b, b), lin.linear_predictor @ b)


def test_predict_patch_zero_when_lambda_huge():
    model = small_model(lam=1e9)
    model = Model(model.dict_blurry, model.dict_sharp, np.zeros_like(model.linear_predictor),
                  model.lam, 3, 5)
    b = np.random.default_rng(3).standard_normal(25)
    assert np.all(restore.predict_patch(model, b, b) == 0)


def test_predict_patch_uses_raw_patch_for_code():
    model = small_model()
    rng = np.random.default_rng(4)
    b = rng.standard_normal(25)
    p1 = restore.predict_patch(model, b, np.zeros(25))
    p2 = restore.predict_patch(model, b + 1.0, np.zeros(25))
    assert not np.allclose(p1, p2)
    np.testing.assert_allclose(restore.predict_patch(model, b, b) - p1,
                               model.linear_predictor @ b, atol=1e-12)


def test_predict_patch_shape_check():
    with pytest.raises(InvalidInputError):
        restore.predict_patch(small_model(), np.zeros(9), np.zeros(9))


def test_predict_patches_matches_single():
    model = small_model()
    rng = np.random.default_rng(5)
    B = rng.standard_normal((30, 25))
    Bt = B + 0.1 * rng.standard_normal((30, 25))
    got = restore.predict_patches(model, B, Bt, chunk=7)
    for i in range(30):
        np.testing.assert_allclose(got[i], restore.predict_patch(model, B[i], Bt[i]),
                                   rtol=1e-6, atol=1e-8)


# -- deblurring -------------------------------------------------------------

def test_coverage_counts():
    model = small_model()
    img = np.random.default_rng(6).uniform(0, 255, (24, 30))
    _, counts = restore.deblur(model, img, return_counts=True)
    assert counts.shape == img.shape
    assert np.all(counts[4:-4, 4:-4] == 9)
    assert counts.max() == 9
    # border pixels beyond the outermost sharp windows stay uncovered
    assert np.all(counts[0] == 0) and np.all(counts[:, 0] == 0)


def test_uncovered_pixels_keep_denoised_input():
    model = small_model()
    img = np.random.default_rng(7).uniform(0, 255, (20, 20))
    out = restore.deblur(model, img, denoiser="gaussian:1.0")
    den = ip.denoise(img, "gaussian:1.0")
    np.testing.assert_array_equal(out[0], den[0])
    np.testing.assert_array_equal(out[:, -1], den[:, -1])


def test_constant_image_through_identity_model():
    W = center_selector(3, 5)
    Db = np.eye(25)[:, :4]
    model = Model(Db, np.zeros((9, 4)), W, 0.1, 3, 5)
    img = np.full((16, 16), 77.0)
    np.testing.assert_allclose(restore.deblur(model, img), img, atol=1e-12)


def test_identity_model_is_exact():
    model = Model(np.eye(25)[:, :3], np.zeros((9, 3)), center_selector(3, 5), 0.1, 3, 5)
    img = np.random.default_rng(8).uniform(0, 255, (30, 26))
    out = restore.deblur(model, img)
    assert restore.psnr(img, out, margin=0) >= 40.0
    np.testing.assert_allclose(out, img, atol=1e-9)


def test_deblur_deterministic():
    model = small_model()
    img = np.random.default_rng(9).uniform(0, 255, (22, 22))
    assert np.array_equal(restore.deblur(model, img), restore.deblur(model, img))


def test_deblur_stride_still_covers_interior():
    model = small_model()
    img = np.random.default_rng(10).uniform(0, 255, (25, 25))
    _, counts = restore.deblur(model, img, stride=2, return_counts=True)
    assert counts[2:-2, 2:-2].min() >= 1


def test_deblur_too_small():
    with pytest.raises(InvalidInputError):
        restore.deblur(small_model(), np.zeros((4, 40)))


def test_zoom_size():
    model = small_model()
    low = np.random.default_rng(11).uniform(0, 255, (10, 13))
    out = restore.zoom(model, low, 2)
    assert out.shape == (20, 26)
    assert restore.zoom(model, low, 3).shape == (30, 39)


# -- metrics ----------------------------------------------------------------

def test_psnr_examples():
    ref = np.zeros((40, 40))
    assert restore.psnr(ref, ref + 255.0) == pytest.approx(0.0, abs=1e-12)
    assert restore.psnr(ref, ref + 16.0) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-9)
    assert round(restore.psnr(ref, ref + 16.0), 2) == 24.05
    assert restore.psnr(ref, ref) == math.inf


def test_psnr_one_db_is_mse_ratio():
    rng = np.random.default_rng(12)
    ref = rng.uniform(0, 255, (50, 50))
    e = rng.standard_normal((50, 50))
    p1 = restore.psnr(ref, ref + e, margin=0)
    p2 = restore.psnr(ref, ref + e * math.sqrt(10 ** -0.1), margin=0)
    assert p2 - p1 == pytest.approx(1.0, abs=1e-9)
    assert 10 ** -0.1 == pytest.approx(0.794, abs=1e-3)


def test_psnr_margin_ignores_border():
    ref = np.zeros((40, 40))
    test = ref.copy()
    test[:13] = 200
    test[:, -13:] = 200
    assert restore.psnr(ref, test) == math.inf
    assert restore.psnr(ref, test, margin=12) < math.inf


def test_psnr_errors():
    with pytest.raises(InvalidInputError):
        restore.psnr(np.zeros((5, 5)), np.zeros((5, 6)))
    with pytest.raises(InvalidInputError):
        restore.psnr(np.zeros((20, 20)), np.zeros((20, 20)))


def test_isnr_edge_cases():
    ref = np.random.default_rng(13).uniform(0, 255, (40, 40))
    noisy = ref + 5.0
    assert restore.isnr(ref, noisy, noisy) == 0.0
    assert restore.isnr(ref, noisy, ref) == math.inf
    assert restore.isnr(ref, ref, ref) == 0.0


@given(seed=st.integers(0, 2**32 - 1), s1=st.floats(0.1, 50), s2=st.floats(0.1, 50))
def test_property_report_consistency(seed, s1, s2):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0, 255, (32, 32))
    deg = ref + s1 * rng.standard_normal(ref.shape)
    out = ref + s2 * rng.standard_normal(ref.shape)
    rep = restore.evaluate(ref, deg, out)
    assert rep.isnr == pytest.approx(rep.psnr_output - rep.psnr_input, abs=1e-12)
    assert rep.border_margin == restore.BORDER_MARGIN
    assert rep.psnr_input == restore.psnr(ref, deg)


def test_report_text():
    rep = restore.RestorationReport(20.0, math.inf, math.inf, 13, 1.5)
    text = rep.to_text()
    assert "psnr_input: 20.000000" in text
    assert "psnr_output: inf" in text
    assert "runtime: 1.500" in text
    assert "runtime" not in restore.RestorationReport(1.0, 2.0, 1.0, 13).to_text()
