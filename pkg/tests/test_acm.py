import numpy as np
import pytest

from acmseg import acm
from acmseg import autodiff as ad
from acmseg.acm import AcmConfig
from acmseg.autodiff import Tape, grad_check
from acmseg.metrics import dice
from acmseg.training import soft_dice_loss


ETA = 1e-8  # denominator guard of the region means


def windowed_mean(values, weights, r):
    """Direct enumeration of the clipped (2r+1)^2 window."""
    h, w = values.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            sl = (slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1))
            n = weights[sl].size
            out[i, j] = ((values[sl] * weights[sl]).sum() / n) / (weights[sl].sum() / n + ETA)
    return out


def literal_energy(img, phi, lam1, lam2, mu, nu, eps, r):
    """Term-by-term numpy re-evaluation of the region energy."""
    H = 0.5 + np.arctan(phi / eps) / np.pi
    Hout = 0.5 + np.arctan(-phi / eps) / np.pi
    delta = eps / (np.pi * (eps ** 2 + phi ** 2))
    pad = np.pad(phi, 1, mode="edge")
    gx = (pad[1:-1, 2:] - pad[1:-1, :-2]) / 2
    gy = (pad[2:, 1:-1] - pad[:-2, 1:-1]) / 2
    grad = np.sqrt(gx ** 2 + gy ** 2 + 1e-8)
    m1 = windowed_mean(img, H, r)
    m2 = windowed_mean(img, Hout, r)
    return np.sum(mu * delta * grad + nu * H + lam1 * (img - m1) ** 2 * H
                  + lam2 * (img - m2) ** 2 * (1 - H))


def disk_image(size=64, radius=16, noise=0.05, seed=0):
    yy, xx = np.indices((size, size))
    c = (size - 1) / 2
    truth = np.hypot(yy - c, xx - c) <= radius
    rng = np.random.default_rng(seed)
    img = np.where(truth, 0.8, 0.2) + rng.normal(0, noise, truth.shape)
    return img, truth


# -- Heaviside / Dirac ---------------------------------------------------------

def test_heaviside_values():
    assert acm.heaviside_eps(np.array(0.0)).data == 0.5
    assert acm.heaviside_eps(np.array(2.0), eps=2.0).data == pytest.approx(0.75, abs=1e-15)
    assert acm.heaviside_eps(np.array(1e12)).data == pytest.approx(1.0)


def test_heaviside_partitions_unity():
    phi = np.random.default_rng(0).normal(scale=5, size=(20, 20))
    h = acm.heaviside_eps(phi).data
    assert np.all((h > 0) & (h < 1))
    assert np.all(h + (1 - h) == 1)


def test_dirac_values():
    for eps in (0.5, 1.0, 3.0):
        assert acm.dirac_eps(np.array(0.0), eps).data == pytest.approx(1 / (np.pi * eps), rel=1e-15)
        assert acm.dirac_eps(np.array(eps), eps).data == pytest.approx(1 / (2 * np.pi * eps), rel=1e-15)


def test_dirac_integrates_to_one():
    eps = 1.0
    phi = np.linspace(-1000 * eps, 1000 * eps, 2_000_001)
    assert abs(np.trapezoid(acm.dirac_eps(phi, eps).data, phi) - 1.0) < 1e-3


@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_dirac_is_heaviside_derivative(eps):
    phi0 = np.random.default_rng(1).normal(scale=3, size=(6, 7))
    tape = Tape()
    phi = tape.variable(phi0)
    (g,) = tape.gradient(ad.sum(acm.heaviside_eps(phi, eps)), [phi])
    np.testing.assert_allclose(g, acm.dirac_eps(phi0, eps).data, rtol=1e-10, atol=0)
    h = 1e-5
    fd = (acm.heaviside_eps(phi0 + h, eps).data - acm.heaviside_eps(phi0 - h, eps).data) / (2 * h)
    np.testing.assert_allclose(fd, acm.dirac_eps(phi0, eps).data, rtol=1e-8, atol=0)


# -- curvature ------------------------------------------------------------------

def test_curvature_of_circle():
    # positive inside: the gradient points inward, so the divergence is -1/d
    c = (23.5, 23.5)
    phi = acm.circle_sdf((48, 48), c, 10.0)
    yy, xx = np.indices(phi.shape)
    d = np.hypot(yy - c[0], xx - c[1])
    band = np.abs(phi) < 3
    k = acm.curvature(phi).data
    assert np.max(np.abs(k + 1 / d)[band]) < 0.01
    contour = np.abs(phi) < 0.5
    assert np.all(np.abs(np.abs(k[contour]) - 0.1) < 0.01)


def test_curvature_of_plane():
    phi = np.indices((12, 12))[1] - 5.3
    k = acm.curvature(phi).data
    assert np.max(np.abs(k[2:-2, 2:-2])) < 1e-6


def test_curvature_is_odd():
    phi = np.random.default_rng(2).normal(size=(9, 11))
    assert np.array_equal(acm.curvature(-phi).data, -acm.curvature(phi).data)


# -- local means ----------------------------------------------------------------

def test_local_means_of_constant_image():
    phi = np.random.default_rng(3).normal(scale=4, size=(16, 16))
    m1, m2 = acm.local_region_means(np.full((16, 16), 0.37), phi, radius=3)
    np.testing.assert_allclose(m1.data, 0.37, atol=1e-6)
    np.testing.assert_allclose(m2.data, 0.37, atol=1e-6)


def test_local_means_match_window_enumeration():
    rng = np.random.default_rng(4)
    img, phi = rng.uniform(size=(10, 13)), rng.normal(scale=3, size=(10, 13))
    m1, m2 = acm.local_region_means(img, phi, eps=1.0, radius=2)
    H = 0.5 + np.arctan(phi) / np.pi
    np.testing.assert_allclose(m1.data, windowed_mean(img, H, 2), rtol=1e-12)
    np.testing.assert_allclose(m2.data, windowed_mean(img, 1 - H, 2), rtol=1e-12)


def test_local_means_on_disk_contour():
    yy, xx = np.indices((64, 64))
    d = np.hypot(yy - 31.5, xx - 31.5)
    img = np.where(d <= 16, 0.8, 0.2)
    phi = acm.circle_sdf((64, 64), (31.5, 31.5), 16.0)
    on = np.abs(phi) < 0.5
    # the arctan tails of a width-1 Heaviside leak about 0.1 across the contour,
    # so the 0.05 band is checked with a sharper Heaviside
    m1, m2 = acm.local_region_means(img, phi, eps=0.25, radius=5)
    assert np.all(np.abs(m1.data[on] - 0.8) <= 0.05)
    assert np.all(np.abs(m2.data[on] - 0.2) <= 0.05)
    m1, m2 = acm.local_region_means(img, phi, eps=1.0, radius=5)
    assert np.all(np.abs(m1.data[on] - 0.8) <= 0.15)
    assert np.all(np.abs(m2.data[on] - 0.2) <= 0.15)


def test_local_means_swap_under_negation():
    rng = np.random.default_rng(5)
    img, phi = rng.uniform(size=(12, 12)), rng.normal(scale=2, size=(12, 12))
    for r in (3, None):
        m1, m2 = acm.local_region_means(img, phi, radius=r)
        n1, n2 = acm.local_region_means(img, -phi, radius=r)
        assert np.array_equal(m1.data, n2.data) and np.array_equal(m2.data, n1.data)


def test_local_means_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        acm.local_region_means(np.zeros((4, 4)), np.zeros((5, 4)))


# -- energy -----------------------------------------------------------------------

def test_energy_constant_image_is_length_term():
    phi = acm.circle_sdf((20, 20), (9.5, 9.5), 5.0)
    cfg = AcmConfig(window_radius=3)
    e = acm.energy(np.full((20, 20), 0.5), phi, 1.0, 1.0, cfg).data
    length = np.sum(cfg.mu * acm.dirac_eps(phi).data * acm.gradient_magnitude(phi).data)
    assert e == pytest.approx(length, rel=1e-12)
    assert e >= 0


def test_energy_zero_weights():
    rng = np.random.default_rng(6)
    cfg = AcmConfig(mu=0.0, nu=0.0, window_radius=3)
    assert acm.energy(rng.uniform(size=(8, 8)), rng.normal(size=(8, 8)), 0.0, 0.0, cfg).data == 0.0


def test_energy_matches_literal_oracle():
    rng = np.random.default_rng(7)
    img, phi = rng.uniform(size=(9, 10)), rng.normal(scale=2, size=(9, 10))
    lam1, lam2 = rng.uniform(0.5, 2, size=(9, 10)), rng.uniform(0.5, 2, size=(9, 10))
    cfg = AcmConfig(mu=0.2, nu=0.3, window_radius=2)
    got = acm.energy(img, phi, lam1, lam2, cfg).data
    want = literal_energy(img, phi, lam1, lam2, 0.2, 0.3, 1.0, 2)
    assert got == pytest.approx(want, rel=1e-12)


def test_energy_gradient():
    rng = np.random.default_rng(8)
    img, phi = rng.uniform(size=(10, 10)), rng.normal(scale=2, size=(10, 10))
    cfg = AcmConfig(window_radius=3)
    assert grad_check(lambda p: acm.energy(img, p, 1.0, 1.5, cfg), phi) < 1e-4


# -- acm_step ---------------------------------------------------------------------

def test_step_fixed_point_on_constant_image():
    phi = np.random.default_rng(9).normal(size=(12, 12))
    cfg = AcmConfig(mu=0.0, nu=0.0, window_radius=3)
    lam = np.full((12, 12), 1.3)
    out = acm.acm_step(phi, np.full((12, 12), 0.4), lam, lam, cfg).data
    # the only residue is the square of the mean guard's relative bias
    np.testing.assert_allclose(out, phi, rtol=0, atol=1e-15)
    half = np.full((12, 12), 0.5)
    out = acm.acm_step(phi, half, lam, lam, AcmConfig(mu=0.0, window_radius=None)).data
    np.testing.assert_allclose(out, phi, rtol=0, atol=1e-15)


def test_step_sign_rule():
    # pixel halfway between the two region means: (I-m1)^2 == (I-m2)^2
    cfg = AcmConfig(mu=0.0, nu=0.0, window_radius=None)
    phi = np.where(np.indices((8, 8))[1] < 4, 3.0, -3.0)
    img = np.where(phi > 0, 0.9, 0.1)
    m1, m2 = acm.local_region_means(img, phi, radius=None)
    img = img.copy()
    for _ in range(60):  # the pixel moves the global means it is compared with
        img[2, 3] = (m1.data.item() + m2.data.item()) / 2
        m1, m2 = acm.local_region_means(img, phi, radius=None)
    a, b = (img[2, 3] - m1.data.item()) ** 2, (img[2, 3] - m2.data.item()) ** 2
    assert a == pytest.approx(b, rel=1e-9) and a > 0
    for l1, l2 in ((1.0, 2.0), (2.0, 1.0)):
        lam1, lam2 = np.ones((8, 8)), np.ones((8, 8))
        lam1[2, 3], lam2[2, 3] = l1, l2
        delta = acm.acm_step(phi, img, lam1, lam2, cfg).data[2, 3] - phi[2, 3]
        assert np.sign(delta) == np.sign(l2 - l1)


@pytest.mark.parametrize("radius", [2, None])
def test_step_mirror_antisymmetry(radius):
    rng = np.random.default_rng(10)
    img, phi = rng.uniform(size=(14, 14)), rng.normal(scale=3, size=(14, 14))
    lam1, lam2 = rng.uniform(0.5, 2, size=(14, 14)), rng.uniform(0.5, 2, size=(14, 14))
    cfg = AcmConfig(window_radius=radius)
    a = acm.acm_step(phi, img, lam1, lam2, cfg).data
    b = acm.acm_step(-phi, img, lam2, lam1, cfg).data
    np.testing.assert_allclose(b, -a, rtol=0, atol=1e-12)


def test_step_reports_first_bad_pixel():
    phi = np.zeros((5, 5))
    lam = np.ones((5, 5))
    lam[1, 2] = np.nan
    with pytest.raises(acm.AcmError, match=r"\(1, 2\)"):
        acm.acm_step(phi, np.random.default_rng(0).uniform(size=(5, 5)), lam, 1.0, AcmConfig(window_radius=1))


def test_config_validation():
    for bad in (dict(mu=-1), dict(eps=0), dict(dt=0), dict(window_radius=0), dict(steps=0),
                dict(band_half_width=0.5)):
        with pytest.raises(ValueError):
            AcmConfig(**bad)


# -- evolve -------------------------------------------------------------------------

def test_evolve_one_step_equals_step():
    rng = np.random.default_rng(11)
    img, phi = rng.uniform(size=(10, 10)), rng.normal(size=(10, 10))
    cfg = AcmConfig(window_radius=2)
    assert np.array_equal(acm.evolve(phi, img, 1.0, 1.0, cfg, steps=1).data,
                          acm.acm_step(phi, img, 1.0, 1.0, cfg).data)
    with pytest.raises(ValueError):
        acm.evolve(phi, img, 1.0, 1.0, cfg, steps=0)


def test_evolve_recovers_disk():
    img, truth = disk_image(size=48, radius=12)
    phi0 = acm.circle_sdf(img.shape, (23.5, 23.5), 14.0)
    phi = acm.evolve(phi0, img, 1.0, 1.0, AcmConfig(), steps=200)
    assert dice(truth, acm.interior_mask(phi)) >= 0.98


def test_unrolled_gradients_wrt_inputs():
    rng = np.random.default_rng(12)
    img, gt = disk_image(size=16, radius=5, seed=1)
    phi0 = acm.circle_sdf((16, 16), (7.5, 7.5), 4.0) + rng.normal(scale=0.1, size=(16, 16))
    lam1, lam2 = rng.uniform(0.5, 1.5, size=(2, 16, 16))
    cfg = AcmConfig(window_radius=3)

    def loss(p, l1, l2):
        return soft_dice_loss(acm.logits_from_levelset(acm.evolve(p, img, l1, l2, cfg, steps=5)), gt)

    # far-field lambda gradients are ~1e-10, below the float64 rounding floor of
    # a central difference, so the oracle runs in extended precision
    wide = np.longdouble
    assert grad_check(lambda v: loss(v, lam1, lam2), phi0, oracle_dtype=wide) < 1e-4
    assert grad_check(lambda v: loss(phi0, v, lam2), lam1, oracle_dtype=wide) < 1e-4
    assert grad_check(lambda v: loss(phi0, lam1, v), lam2, oracle_dtype=wide) < 1e-4


def test_stop_gradient_means_changes_gradient_only():
    img, _ = disk_image(size=16, radius=5)
    phi0 = acm.circle_sdf((16, 16), (7.5, 7.5), 4.0)
    out = []
    for flag in (False, True):
        tape = Tape()
        p = tape.variable(phi0)
        phi = acm.evolve(p, img, 1.0, 1.0, AcmConfig(window_radius=3, stop_gradient_means=flag), steps=3)
        out.append((phi.data, tape.gradient(ad.sum(phi), [p])[0]))
    assert np.array_equal(out[0][0], out[1][0])
    assert not np.allclose(out[0][1], out[1][1])


# -- narrow band ----------------------------------------------------------------------

def test_narrow_band_is_annulus():
    phi = acm.circle_sdf((40, 40), (19.5, 19.5), 10.0)
    yy, xx = np.indices(phi.shape)
    d = np.hypot(yy - 19.5, xx - 19.5)
    assert np.array_equal(acm.narrow_band_mask(phi, 3), (d > 7) & (d < 13))
    with pytest.raises(ValueError):
        acm.narrow_band_mask(phi, 0.5)


def test_wide_band_equals_full_evolution():
    img, _ = disk_image(size=32, radius=8)
    phi0 = acm.circle_sdf(img.shape, (15.5, 15.5), 9.0)
    width = np.abs(phi0).max() + 100
    cfg = AcmConfig(band_half_width=width)
    full = acm.evolve(phi0, img, 1.0, 1.0, cfg, steps=30).data
    banded = acm.evolve(phi0, img, 1.0, 1.0, cfg, steps=30, banded=True).data
    assert np.all(acm.narrow_band_mask(phi0, width))
    assert np.array_equal(full, banded)


# -- logits -----------------------------------------------------------------------------

def test_logits_threshold_matches_interior():
    phi = np.random.default_rng(13).normal(scale=5, size=(30, 30))
    phi[0, 0] = 0.0
    p = acm.logits_from_levelset(phi).data
    assert p[0, 0] == 0.5
    assert acm.logits_from_levelset(np.array(40.0)).data == pytest.approx(1.0)
    assert np.array_equal(p > 0.5, acm.interior_mask(phi))


# -- energy descent diagnostic -------------------------------------------------------------

def test_energy_descent_global_means():
    img, _ = disk_image(size=32, radius=9, seed=3)
    cfg = AcmConfig(window_radius=None, mu=0.2, nu=0.0, dt=0.5)
    phi = acm.circle_sdf(img.shape, (12.0, 14.0), 6.0)
    ok = 0
    for _ in range(40):
        e0 = acm.energy(img, phi, 1.0, 1.0, cfg).data
        phi = acm.acm_step(phi, img, 1.0, 1.0, cfg).data
        e1 = acm.energy(img, phi, 1.0, 1.0, cfg).data
        ok += e1 <= e0 + 1e-6 * abs(e0)
    assert ok / 40 >= 0.95
