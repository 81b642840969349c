"""Zero-mean scalar Gaussian mixture over rain-residual pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-6
DEAD_COMPONENT = 1e-8
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmParams:
    pi: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64).reshape(-1)
        if self.pi.shape != self.sigma2.shape or self.pi.size == 0:
            raise ValueError("pi and sigma2 must be non-empty and of equal length")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must lie on the simplex, got {self.pi}")
        if np.any(self.sigma2 <= 0) or not np.all(np.isfinite(self.sigma2)):
            raise ValueError(f"component variances must be positive, got {self.sigma2}")

    @property
    def K(self) -> int:
        return self.pi.size

    def to_json(self) -> dict:
        return {"pi": self.pi.tolist(), "sigma2": self.sigma2.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "GmmParams":
        return cls(d["pi"], d["sigma2"])


@dataclass
class SynGaussian:
    sigma2_syn: float

    def to_json(self) -> dict:
        return {"sigma2_syn": self.sigma2_syn}

    @classmethod
    def from_json(cls, d: dict) -> "SynGaussian":
        return cls(float(d["sigma2_syn"]))


def initial_gmm(K: int, sigma2_ref: float) -> GmmParams:
    """Uniform weights, variances spread log-evenly around ``sigma2_ref``."""
    if K == 1:
        return GmmParams([1.0], [max(sigma2_ref, VAR_FLOOR)])
    scales = np.logspace(-1.0, 1.0, K)
    return GmmParams(np.full(K, 1.0 / K), np.maximum(sigma2_ref * scales, VAR_FLOOR))


def _flat(residuals) -> np.ndarray:
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("need at least one residual sample")
    return r


def component_log_joint(residuals, gmm: GmmParams) -> np.ndarray:
    """``log pi_k + log N(r_n | 0, sigma2_k)`` as an ``N x K`` matrix."""
    r = _flat(residuals)
    s2 = gmm.sigma2
    with np.errstate(divide="ignore"):
        log_pi = np.log(gmm.pi)
    return log_pi - 0.5 * (_LOG_2PI + np.log(s2)) - 0.5 * (r[:, None] ** 2) / s2


def gmm_nll(residuals, gmm: GmmParams) -> float:
    """``-sum_n log sum_k pi_k N(r_n | 0, sigma2_k)``."""
    return float(-logsumexp(component_log_joint(residuals, gmm), axis=1).sum())


def e_step(residuals, gmm: GmmParams) -> np.ndarray:
    """Responsibilities, one row-stochastic row per residual sample."""
    lj = component_log_joint(residuals, gmm)
    gamma = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return gamma / gamma.sum(axis=1, keepdims=True)


def m_step(residuals, gamma) -> GmmParams:
    r = _flat(residuals)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] != r.size:
        raise ValueError(f"responsibilities {gamma.shape} do not match {r.size} residuals")
    n = r.size
    r2 = r * r
    nk = gamma.sum(axis=0)
    pi = nk / n
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma2 = (gamma * r2[:, None]).sum(axis=0) / nk
    dead = nk < DEAD_COMPONENT
    if np.any(dead):
        pi = np.where(dead, 1.0 / n, pi)
        sigma2 = np.where(dead, np.var(r), sigma2)
    pi = pi / pi.sum()
    return GmmParams(pi, np.maximum(sigma2, VAR_FLOOR))


def fit_em(residuals, gmm: GmmParams, iterations: int) -> tuple[GmmParams, list[float]]:
    """Run ``iterations`` E/M rounds from ``gmm``; also returns the NLL before each round and after the last."""
    r = _flat(residuals)
    history = [gmm_nll(r, gmm)]
    for _ in range(iterations):
        gmm = m_step(r, e_step(r, gmm))
        history.append(gmm_nll(r, gmm))
    return gmm, history


def fit_syn_gaussian(rain_pixels) -> SynGaussian:
    r = _flat(rain_pixels)
    return SynGaussian(max(float(np.mean(r * r)), VAR_FLOOR))


def kl_zero_mean(s2_p, s2_q):
    """KL( N(0, s2_p) || N(0, s2_q) ) = (ratio - ln ratio - 1) / 2, ratio = s2_p / s2_q.

    Written in ``d = ratio - 1`` with a series near ``d = 0`` so that distinct
    variances never round to a zero divergence.
    """
    p = np.asarray(s2_p, dtype=np.float64)
    q = np.asarray(s2_q, dtype=np.float64)
    d = (p - q) / q
    small = np.abs(d) < 1e-3
    ds = np.where(small, d, 0.0)
    series = ds * ds * (0.5 - ds / 3.0 + ds * ds / 4.0 - ds ** 3 / 5.0)
    with np.errstate(invalid="ignore"):
        direct = d - np.log1p(np.where(small, 0.0, d))
    return 0.5 * np.where(small, series, direct)


def kl_anchor(syn: SynGaussian, gmm: GmmParams) -> float:
    """Smallest KL from the synthetic-rain Gaussian to any mixture component."""
    return float(np.min(kl_zero_mean(syn.sigma2_syn, gmm.sigma2)))
