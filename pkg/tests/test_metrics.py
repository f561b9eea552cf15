import numpy as np
import pytest

from revdiff.data import PhantomSpec, gen_phantom
from revdiff.errors import ShapeError
from revdiff.metrics import mae, psnr, ssim3d
from revdiff.rng import Prng


def ssim3d_reference(a, b, window=7, c1=1e-4, c2=9e-4):
    """Direct window-loop SSIM; the independent oracle."""
    E = a.shape[0]
    vals = []
    n = window**3
    for i in range(E - window + 1):
        for j in range(E - window + 1):
            for k in range(E - window + 1):
                wa = a[i : i + window, j : j + window, k : k + window].astype(np.float64)
                wb = b[i : i + window, j : j + window, k : k + window].astype(np.float64)
                mu_a, mu_b = wa.mean(), wb.mean()
                va = ((wa - mu_a) ** 2).sum() / n
                vb = ((wb - mu_b) ** 2).sum() / n
                cov = ((wa - mu_a) * (wb - mu_b)).sum() / n
                vals.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
                )
    return float(np.mean(vals))


def test_psnr_identity_capped():
    x = gen_phantom(PhantomSpec(edge=8, seed=1)).data
    assert psnr(x, x) == 100.0


def test_psnr_known_mse():
    a = np.zeros((10, 10, 10))
    b = np.full((10, 10, 10), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_constant_offset():
    x = gen_phantom(PhantomSpec(edge=8, seed=2)).data.astype(np.float64) * 0.5
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-6)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


def test_ssim_self_is_one():
    x = gen_phantom(PhantomSpec(edge=12, seed=3)).data
    assert ssim3d(x, x) == pytest.approx(1.0, abs=1e-6)


def test_ssim_symmetric():
    a = gen_phantom(PhantomSpec(edge=10, seed=4)).data
    b = gen_phantom(PhantomSpec(edge=10, seed=5)).data
    assert abs(ssim3d(a, b) - ssim3d(b, a)) <= 1e-9


def test_ssim_inverted_phantom_low():
    x = gen_phantom(PhantomSpec(edge=12, n_ellipsoids=2, seed=6)).data
    assert ssim3d(x, 1.0 - x) < 0.5


def test_ssim_matches_reference_loop():
    prng = Prng(7)
    a = np.clip(prng.randn((8, 8, 8), np.float64) * 0.2 + 0.5, 0, 1)
    b = np.clip(prng.randn((8, 8, 8), np.float64) * 0.2 + 0.5, 0, 1)
    assert abs(ssim3d(a, b) - ssim3d_reference(a, b)) <= 1e-9


def test_ssim_window_too_large():
    with pytest.raises(ShapeError):
        ssim3d(np.zeros((5, 5, 5)), np.zeros((5, 5, 5)))


def test_mae_basics():
    x = gen_phantom(PhantomSpec(edge=8, seed=8)).data
    assert mae(x, x) == 0.0
    assert mae(np.zeros((4, 4, 4)), np.ones((4, 4, 4))) == 1.0


def test_mae_triangle_inequality():
    prng = Prng(9)
    for _ in range(10):
        a = prng.randn((6, 6, 6), np.float64)
        b = prng.randn((6, 6, 6), np.float64)
        c = prng.randn((6, 6, 6), np.float64)
        assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12
