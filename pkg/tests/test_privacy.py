"""Clip / noise operators and the Gaussian-DP accountant.

Accountant oracles are independent: mpmath at 30 digits for the closed
forms, scipy.stats.norm for the normal CDF, and brute-force grids for the
monotonicity properties.
"""

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from fedcodec import lora, privacy
from fedcodec.privacy import (
    EPSILON_PRESETS,
    InfeasiblePrivacyTarget,
    PrivacySpec,
    calibrate_sigma,
    clip,
    gdp_delta,
    gdp_mu,
)

mp.mp.dps = 30


def mp_delta(eps, mu):
    Phi = lambda x: mp.ncdf(x)  # noqa: E731
    eps, mu = mp.mpf(eps), mp.mpf(mu)
    return float(Phi(-eps / mu + mu / 2) - mp.e**eps * Phi(-eps / mu - mu / 2))


# -------------------------------------------------------------------- clip


def test_clip_examples():
    np.testing.assert_allclose(clip([3.0, 4.0], 1.0), [0.6, 0.8], rtol=1e-15)
    x = np.array([0.3, 0.4])  # norm 0.5
    np.testing.assert_array_equal(clip(x, 1.0), x)
    np.testing.assert_array_equal(clip(np.zeros(3), 1.0), 0.0)
    with pytest.raises(ValueError):
        clip(x, 0.0)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_clip_norm_direction_and_idempotence(seed, C):
    x = np.random.default_rng(seed).normal(size=(3, 4)) * 10
    c = clip(x, C)
    assert np.linalg.norm(c) == pytest.approx(min(np.linalg.norm(x), C), rel=1e-12)
    assert np.linalg.norm(c / np.linalg.norm(c) - x / np.linalg.norm(x)) < 1e-12
    np.testing.assert_allclose(clip(c, C), c, rtol=1e-14)


def test_clip_factors_is_per_tensor(rng):
    f = lora.LoraFactors(rng.normal(size=(2, 4, 3, 5)) * 5, rng.normal(size=(2, 4, 5, 3)) * 5)
    c = privacy.clip_factors(f, 1.0)
    for t in c.tensors():
        assert np.linalg.norm(t) == pytest.approx(1.0, rel=1e-12)


# ------------------------------------------------------------------- noise


def test_noise_zero_sigma_is_exact(rng):
    x = rng.normal(size=10)
    np.testing.assert_array_equal(privacy.noise(x, 0.0, rng), x)
    with pytest.raises(ValueError):
        privacy.noise(x, -1.0, rng)


def test_noise_statistics():
    sigma = 0.37
    n = privacy.noise(np.zeros(10**6), sigma, np.random.default_rng(0))
    assert abs(n.mean()) < 5 * sigma / 1000
    assert n.var() == pytest.approx(sigma**2, rel=0.01)


def test_identity_channel_mse_at_table_sigma():
    # [PAPER] sigma = 5e-3 gives per-element MSE 2.50e-5
    x = np.random.default_rng(1).normal(size=2 * 10**5)
    y = privacy.noise(x, 5e-3, np.random.default_rng(2))
    assert np.mean((x - y) ** 2) == pytest.approx(2.5e-5, rel=0.02)


def test_seeded_noise_is_reproducible_and_client_streams_differ():
    a = privacy.noise(np.zeros(5), 1.0, privacy.client_rng(0, 3, 1))
    b = privacy.noise(np.zeros(5), 1.0, privacy.client_rng(0, 3, 1))
    c = privacy.noise(np.zeros(5), 1.0, privacy.client_rng(0, 3, 2))
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_privatize_clips_before_noise(rng):
    f = lora.LoraFactors(rng.normal(size=(1, 4, 2, 6)) * 9, rng.normal(size=(1, 4, 6, 2)) * 9)
    seen = []
    spec = PrivacySpec(clip=0.5, sigma=0.0)
    out = privacy.privatize(f, spec, rng, on_clipped=seen.append)
    assert all(np.linalg.norm(t) <= 0.5 + 1e-12 for t in seen[0].tensors())
    assert out.equals(seen[0])  # sigma 0 adds nothing


# ------------------------------------------------------------- sensitivity


def test_sensitivity_examples():
    assert privacy.sensitivity(1, 4) == 0.25
    assert privacy.sensitivity(2, 1) == 2
    with pytest.raises(ValueError):
        privacy.sensitivity(1, 0)


@given(st.floats(1e-3, 1e3), st.integers(1, 1000))
def test_sensitivity_halves_when_k_doubles(C, K):
    assert privacy.sensitivity(C, 2 * K) == pytest.approx(privacy.sensitivity(C, K) / 2, rel=1e-15)


def test_noise_std_modes():
    assert PrivacySpec(clip=2.0, sigma=3.0).noise_std(4) == 6.0
    assert PrivacySpec(clip=2.0, sigma=3.0, sensitivity="lemma").noise_std(4) == 1.5


@pytest.mark.parametrize(
    "kw", [dict(clip=0), dict(sigma=-1), dict(p=0), dict(p=1.5), dict(rounds=0), dict(epsilon=0), dict(delta=1), dict(sensitivity="x")]
)
def test_privacy_spec_validation(kw):
    with pytest.raises(ValueError):
        PrivacySpec(**kw)


# ------------------------------------------------------------- accountant


@pytest.mark.parametrize("x,phi", [(0.0, 0.5), (1.0, 0.8413447460685429), (-1.959963984540054, 0.025), (-8.0, 6.22096057427178e-16)])
def test_norm_cdf_against_tabulated_values(x, phi):
    assert privacy.norm_cdf(x) == pytest.approx(phi, rel=1e-12)


def test_norm_cdf_against_scipy_on_grid():
    for x in np.linspace(-30, 8, 400):
        assert privacy.norm_cdf(x) == pytest.approx(norm.cdf(x), rel=1e-12, abs=1e-300)


def test_gdp_mu_examples():
    # [DERIVED] 0.05 * sqrt(20) * sqrt(e - 1)
    assert gdp_mu(0.05, 20, 1.0) == pytest.approx(float(0.05 * mp.sqrt(20) * mp.sqrt(mp.e - 1)), rel=1e-14)
    assert gdp_mu(0.05, 20, 1.0) == pytest.approx(0.2931, abs=1e-4)
    assert gdp_mu(0.1, 20, 1.3) == pytest.approx(2 * gdp_mu(0.05, 20, 1.3), rel=1e-14)
    with pytest.raises(ValueError):
        gdp_mu(0.1, 20, 0.0)


def test_gdp_mu_decreases_in_sigma():
    mus = [gdp_mu(0.5, 10, s) for s in np.geomspace(0.1, 1e4, 200)]
    assert all(a > b for a, b in zip(mus, mus[1:]))
    assert mus[-1] < 1e-3


def test_gdp_delta_examples():
    # [DERIVED] Phi(-0.5) - e * Phi(-1.5)
    assert gdp_delta(1.0, 1.0) == pytest.approx(0.1269, abs=1e-3)
    assert gdp_delta(1.0, 1.0) == pytest.approx(mp_delta(1, 1), rel=1e-12)
    # [DERIVED] Phi(0.5) - Phi(-0.5)
    assert gdp_delta(0.0, 1.0) == pytest.approx(0.3829, abs=1e-4)
    assert gdp_delta(0.5, 1e-9) == 0.0


@pytest.mark.parametrize("eps,mu", [(0.25, 0.3), (2.0, 1.7), (8.0, 3.0), (0.1, 0.05)])
def test_gdp_delta_against_high_precision(eps, mu):
    assert gdp_delta(eps, mu) == pytest.approx(mp_delta(eps, mu), rel=1e-9)


def test_gdp_delta_monotone_grids():
    mus = np.linspace(0.05, 5, 120)
    epss = np.linspace(0.0, 6, 120)
    violations = 0
    for e in epss:
        d = [gdp_delta(e, m) for m in mus]
        violations += sum(a >= b for a, b in zip(d, d[1:]) if b > 1e-300)
    for m in mus:
        d = [gdp_delta(e, m) for e in epss]
        violations += sum(a <= b for a, b in zip(d, d[1:]) if a > 1e-300)
    assert violations == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 50.0))
def test_calibrate_sigma_round_trip(sigma0):
    eps, p, T = 0.01, 0.03, 1
    target = gdp_delta(eps, gdp_mu(p, T, sigma0))
    assert calibrate_sigma(eps, target, p, T) == pytest.approx(sigma0, rel=1e-6)


def test_calibrate_sigma_hits_target_delta():
    for eps in EPSILON_PRESETS:
        s = calibrate_sigma(eps, 1e-5, 0.05, 20)
        assert abs(gdp_delta(eps, gdp_mu(0.05, 20, s)) - 1e-5) < 1e-9


def test_calibrate_sigma_monotone_in_epsilon():
    sig = [calibrate_sigma(e, 1e-5, 0.05, 20) for e in EPSILON_PRESETS]
    assert sig[0] > sig[1] > sig[2]


def test_calibrate_sigma_errors():
    with pytest.raises(ValueError):
        calibrate_sigma(1.0, 1.0, 0.1, 10)
    with pytest.raises(InfeasiblePrivacyTarget):
        calibrate_sigma(1.0, 0.5, 0.01, 1, lo=5.0)  # met already at the smallest sigma
    with pytest.raises(InfeasiblePrivacyTarget):
        calibrate_sigma(0.01, 1e-300, 1.0, 1000, hi=2.0)


def test_privacy_spend_ledger_is_monotone():
    spend = privacy.privacy_spend(2.0, 0.1, 10, 1.0)
    assert len(spend.ledger) == 10
    mus = [m for _, m, _ in spend.ledger]
    assert mus == sorted(mus)
    assert spend.mu == pytest.approx(gdp_mu(0.1, 10, 1.0))


def test_accountant_table_presets():
    rows = privacy.accountant_table(EPSILON_PRESETS, 1e-5, 0.05, 20)
    assert [r["epsilon"] for r in rows] == list(EPSILON_PRESETS)
    for r in rows:
        assert r["delta"] == pytest.approx(1e-5, abs=1e-9)
