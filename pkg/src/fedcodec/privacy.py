"""Client-level DP: clipping, Gaussian noising and the GDP accountant.

The accountant uses the central-limit form of Poisson-subsampled Gaussian
composition: ``mu = p * sqrt(T) * sqrt(exp(1/sigma^2) - 1)`` and the
mu-GDP to (epsilon, delta) conversion

    delta(eps) = Phi(-eps/mu + mu/2) - exp(eps) * Phi(-eps/mu - mu/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .lora import LoraFactors

#: tight / medium / relaxed budgets used for the DP experiments
EPSILON_PRESETS = (0.25, 2.0, 8.0)


class InfeasiblePrivacyTarget(ValueError):
    pass


@dataclass
class PrivacySpec:
    """Parameters of the clip-then-noise mechanism and its accounting target.

    ``sigma`` is the noise multiplier; per-element noise std is
    ``sigma * sensitivity`` where sensitivity is ``C`` (``"clip"``, default)
    or ``C / K`` (``"lemma"``, K = selected clients in the round).
    """

    clip: float = 1.0
    sigma: float = 1.0
    p: float = 1.0
    rounds: int = 20
    epsilon: float = 2.0
    delta: float = 1e-5
    seed: int = 0
    sensitivity: str = "clip"

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip bound C must be > 0")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.p <= 1:
            raise ValueError("sampling probability p must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds T must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.sensitivity not in ("clip", "lemma"):
            raise ValueError(f"unknown sensitivity mode {self.sensitivity!r}")

    def noise_std(self, n_selected: int = 1) -> float:
        s = self.clip if self.sensitivity == "clip" else sensitivity(self.clip, n_selected)
        return self.sigma * s


@dataclass
class PrivacySpend:
    mu: float
    delta: float
    ledger: List[tuple] = field(default_factory=list)  # (round, mu, delta)


# ------------------------------------------------------------------ operators


def clip(X, C: float) -> np.ndarray:
    """Scale ``X`` into the l2 ball of radius ``C``; zero passes through."""
    if not C > 0:
        raise ValueError("C must be > 0")
    X = np.asarray(X, dtype=np.float64)
    norm = float(np.linalg.norm(X.ravel()))
    if norm <= C:
        return X.copy()
    return X * (C / norm)


def noise(X, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every element."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    if sigma == 0:
        return X.copy()
    return X + rng.normal(0.0, sigma, size=X.shape)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Independent noise stream per (seed, round, client)."""
    return np.random.default_rng([int(seed), int(round_index), int(client_id), 0x9E37])


def clip_factors(factors: LoraFactors, C: float) -> LoraFactors:
    """Clip every A and every B tensor independently."""
    A = np.empty_like(factors.A)
    B = np.empty_like(factors.B)
    for l in range(factors.n_layers):
        for p in range(4):
            A[l, p] = clip(factors.A[l, p], C)
            B[l, p] = clip(factors.B[l, p], C)
    return LoraFactors(A, B)


def noise_factors(factors: LoraFactors, std: float, rng: np.random.Generator) -> LoraFactors:
    return LoraFactors(noise(factors.A, std, rng), noise(factors.B, std, rng))


def privatize(
    factors: LoraFactors, spec: PrivacySpec, rng: np.random.Generator, n_selected: int = 1, on_clipped=None
) -> LoraFactors:
    """Clip then noise. ``on_clipped`` observes the clipped factors before noise."""
    clipped = clip_factors(factors, spec.clip)
    if on_clipped is not None:
        on_clipped(clipped)
    return noise_factors(clipped, spec.noise_std(n_selected), rng)


def sensitivity(C: float, K: int) -> float:
    """Sensitivity of the aggregate of K clipped client updates."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not C > 0:
        raise ValueError("C must be > 0")
    return C / K


# ----------------------------------------------------------------- accountant


def norm_cdf(x: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def gdp_mu(p: float, T: int, sigma: float) -> float:
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if T < 1:
        raise ValueError("T must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma = 0 gives unbounded mu (no privacy)")
    inv = 1.0 / (sigma * sigma)
    if inv > 700:
        raise OverflowError(f"sigma={sigma} too small: exp(1/sigma^2) overflows")
    return p * math.sqrt(T) * math.sqrt(math.expm1(inv))


def gdp_delta(epsilon: float, mu: float) -> float:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mu == 0:
        return 0.0
    a = -epsilon / mu
    d = norm_cdf(a + mu / 2) - math.exp(epsilon) * norm_cdf(a - mu / 2)
    return min(max(d, 0.0), 1.0)


def privacy_spend(epsilon: float, p: float, T: int, sigma: float) -> PrivacySpend:
    ledger = []
    for t in range(1, T + 1):
        mu_t = gdp_mu(p, t, sigma)
        ledger.append((t, mu_t, gdp_delta(epsilon, mu_t)))
    return PrivacySpend(mu=ledger[-1][1], delta=ledger[-1][2], ledger=ledger)


def calibrate_sigma(
    epsilon: float, delta: float, p: float, T: int, lo: float = 0.05, hi: float = 1e4, rtol: float = 1e-13
) -> float:
    """Smallest-noise sigma whose accounted delta equals ``delta``.

    delta is strictly decreasing in sigma, so the root is unique; it is found
    by bisection on ``log(sigma)`` after checking the bracket.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")

    def f(s):
        return gdp_delta(epsilon, gdp_mu(p, T, s)) - delta

    if f(lo) < 0:
        raise InfeasiblePrivacyTarget(f"target delta={delta} already met at sigma={lo}; bracket too narrow")
    if f(hi) > 0:
        raise InfeasiblePrivacyTarget(f"delta={delta} unreachable for sigma <= {hi} (epsilon={epsilon}, p={p}, T={T})")
    a, b = math.log(lo), math.log(hi)
    for _ in range(400):
        m = 0.5 * (a + b)
        if f(math.exp(m)) > 0:
            a = m
        else:
            b = m
        if b - a < rtol:
            break
    return math.exp(0.5 * (a + b))


def accountant_table(
    epsilons: Sequence[float], delta: float, p: float, T: int, sigma: Optional[float] = None
) -> List[dict]:
    """One row per epsilon: calibrated (or given) sigma, mu and achieved delta."""
    rows = []
    for eps in epsilons:
        s = sigma if sigma is not None else calibrate_sigma(eps, delta, p, T)
        mu = gdp_mu(p, T, s)
        rows.append({"epsilon": eps, "p": p, "T": T, "sigma": s, "mu": mu, "delta": gdp_delta(eps, mu)})
    return rows
