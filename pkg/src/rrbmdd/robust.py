"""Robustness mechanisms layered on the RBM.

Two independent switches:

* robust gradient -- per-instance losses are summarised by an M-estimator of
  location; the implied soft-truncation weights rescale each instance's
  contribution to the data-phase statistics of the CD update.
* robust energy -- a per-feature Gaussian noise channel competes with the
  clean RBM reconstruction; features better explained by noise are gated off
  (excluded from training statistics and from the reconstruction error).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .rbm import (
    RbmParams,
    apply_cd_update,
    cd_k_update,
    cd_statistics,
    energy,
    reconstruct,
)

SIGMA_FLOOR = 1e-8


# --- loss functions --------------------------------------------------------

def _rho_squared(x):
    return x * x


def _psi_squared(x):
    return 2.0 * x


def _dpsi_squared(x):
    return np.full_like(np.asarray(x, dtype=float), 2.0)


def _rho_pseudo_huber(x):
    return np.sqrt(1.0 + x * x) - 1.0


def _psi_pseudo_huber(x):
    return x / np.sqrt(1.0 + x * x)


def _dpsi_pseudo_huber(x):
    return (1.0 + x * x) ** -1.5


RHO = {
    "squared": (_rho_squared, _psi_squared, _dpsi_squared),
    "pseudo_huber": (_rho_pseudo_huber, _psi_pseudo_huber, _dpsi_pseudo_huber),
}


def _chi_bounded(x, q=0.5):
    x2 = x * x
    return x2 / (1.0 + x2) - q


def _chi_quadratic(x):
    return x * x - 1.0


CHI = {"bounded": _chi_bounded, "quadratic": _chi_quadratic}


@dataclass(frozen=True)
class RobustConfig:
    use_robust_gradient: bool = True
    use_robust_energy: bool = True
    delta: float = 0.95
    rho_kind: str = "pseudo_huber"
    chi_kind: str = "bounded"

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.rho_kind not in RHO:
            raise ValueError(f"unknown rho_kind {self.rho_kind!r}")
        if self.chi_kind not in CHI:
            raise ValueError(f"unknown chi_kind {self.chi_kind!r}")

    @property
    def variant(self) -> str:
        return {
            (False, False): "RBM-DD",
            (True, False): "RBM-DD_RG",
            (False, True): "RBM-DD_RE",
            (True, True): "RRBM-DD",
        }[(self.use_robust_gradient, self.use_robust_energy)]

    @classmethod
    def for_variant(cls, name: str, **kwargs) -> RobustConfig:
        flags = {
            "RBM-DD": (False, False),
            "RBM-DD_RG": (True, False),
            "RBM-DD_RE": (False, True),
            "RRBM-DD": (True, True),
        }
        if name not in flags:
            raise ValueError(f"unknown RBM detector variant {name!r}")
        rg, re_ = flags[name]
        return cls(use_robust_gradient=rg, use_robust_energy=re_, **kwargs)


# --- M-estimation ----------------------------------------------------------

def truncation_factor(losses, s: float, rho_kind: str = "pseudo_huber") -> float:
    """argmin over theta of sum_a rho((L_a - theta) / s).

    Solved by safeguarded Newton iterations on the estimating equation
    sum psi((L - theta)/s) = 0, which is monotone in theta for convex rho.
    """
    L = np.asarray(losses, dtype=float).ravel()
    if L.size == 0:
        raise ValueError("losses must be non-empty")
    if not s > 0:
        raise ValueError("scale s must be positive")
    _, psi, dpsi = RHO[rho_kind]
    lo, hi = float(L.min()), float(L.max())
    if lo == hi:
        return lo
    theta = float(np.median(L))
    for _ in range(100):
        r = (L - theta) / s
        g = psi(r).sum()
        if g > 0:
            lo = theta
        else:
            hi = theta
        step = s * g / dpsi(r).sum()
        nxt = theta + step
        if not lo <= nxt <= hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - theta) <= 1e-15 * max(1.0, abs(theta)):
            return nxt
        theta = nxt
    return theta


def dispersion_estimate(losses, chi_kind: str = "bounded", floor: float = SIGMA_FLOOR) -> float:
    """sigma > 0 solving sum_a chi((L_a - mean(L)) / sigma) = 0."""
    L = np.asarray(losses, dtype=float).ravel()
    if L.size < 2:
        raise ValueError("dispersion needs at least two losses")
    d = L - L.mean()
    dmax = float(np.abs(d).max())
    if dmax <= floor:
        return floor
    chi = CHI[chi_kind]

    def f(sigma):
        return chi(d / sigma).sum()

    lo, hi = dmax * 1e-9, dmax * 10.0
    if f(lo) <= 0:
        # too many losses sit exactly on the pivot for a root to exist
        return floor
    return max(brentq(f, lo, hi, xtol=1e-14 * dmax, rtol=1e-14), floor)


def scale_factor(sigma_hat: float, n: int, delta: float) -> float:
    """s = sigma_hat * sqrt(n / log(2 / delta))."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sigma_hat <= 0 or n < 1:
        raise ValueError("sigma_hat must be positive and n >= 1")
    return sigma_hat * math.sqrt(n / math.log(2.0 / delta))


def robust_instance_weights(losses, config: RobustConfig) -> np.ndarray:
    """Soft-truncation weights psi(r) / (psi'(0) r) with r = (L - theta_hat) / s.

    theta_hat is a fixed point of the loss mean weighted by these values.  The
    weights lie in (0, 1] and equal 1 where a loss sits on theta_hat, so a
    batch of identical losses and the squared loss both give all-ones.
    """
    L = np.asarray(losses, dtype=float).ravel()
    if L.size < 2:
        return np.ones_like(L)
    sigma = dispersion_estimate(L, config.chi_kind)
    s = scale_factor(sigma, L.size, config.delta)
    theta = truncation_factor(L, s, config.rho_kind)
    r = (L - theta) / s
    _, psi, dpsi = RHO[config.rho_kind]
    w = np.ones_like(r)
    nz = np.abs(r) > 1e-12
    w[nz] = psi(r[nz]) / (r[nz] * dpsi(np.zeros(1))[0])
    return w


def robust_weight_update(
    v: np.ndarray,
    z: np.ndarray | None,
    params: RbmParams,
    losses: np.ndarray,
    config: RobustConfig,
    eta: float,
    k: int,
    rng: np.random.Generator,
) -> RbmParams:
    """CD-k step in which every instance's gradient share is scaled by its truncation weight.

    With the robust gradient switched off this *is* ``cd_k_update`` (same RNG
    draws, same arithmetic).
    """
    if not config.use_robust_gradient:
        return cd_k_update(v, z, params, k, eta, rng)
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    weights = robust_instance_weights(losses, config)
    data, recon = cd_statistics(v, z, params, k, rng, instance_weights=weights)
    return apply_cd_update(params, data, recon, eta)


# --- gated noise model -----------------------------------------------------

@dataclass
class NoiseModel:
    """Per-feature Gaussian noise channel plus the clean channel's residual scale.

    ``b_tilde``/``sigma2_tilde`` are exponentially weighted moments of the
    observed features; ``resid_var`` is the exponentially weighted mean squared
    clean-reconstruction residual.
    """

    n_features: int
    decay: float = 0.99
    residual_decay: float = 0.998
    odds: float = 10.0
    n_min: int = 100
    var_floor: float = 1e-4
    b_tilde: np.ndarray = field(init=False)
    sigma2_tilde: np.ndarray = field(init=False)
    resid_var: np.ndarray = field(init=False)
    n_seen: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.b_tilde = np.zeros(self.n_features)
        self.sigma2_tilde = np.full(self.n_features, 1.0)
        self.resid_var = np.full(self.n_features, 1.0)
        self._m2 = np.ones(self.n_features)

    @property
    def fitted(self) -> bool:
        return self.n_seen >= self.n_min

    def update(self, v: np.ndarray, residuals: np.ndarray) -> None:
        """Fold a batch (rows in arrival order) into the running moments."""
        v = np.atleast_2d(v)
        residuals = np.atleast_2d(residuals)
        n = v.shape[0]
        if self.n_seen == 0:
            # seed the moments from the first batch instead of the arbitrary init
            self.b_tilde = v.mean(axis=0)
            self._m2 = (v * v).mean(axis=0)
            self.resid_var = np.maximum((residuals**2).mean(axis=0), self.var_floor)
        else:
            wn = _ew_weights(n, self.decay)
            keep = self.decay**n
            self.b_tilde = keep * self.b_tilde + wn @ v
            self._m2 = keep * self._m2 + wn @ (v * v)
            wr = _ew_weights(n, self.residual_decay)
            self.resid_var = self.residual_decay**n * self.resid_var + wr @ (residuals**2)
        self.sigma2_tilde = np.maximum(self._m2 - self.b_tilde**2, self.var_floor)
        self.resid_var = np.maximum(self.resid_var, self.var_floor)
        self.n_seen += n

    def log_odds_noise(self, v: np.ndarray, recon: np.ndarray) -> np.ndarray:
        """log N(v | b~, sigma~^2 + s^2) - log N(v | recon, s^2), elementwise.

        The noise channel's variance includes the clean residual variance so a
        perfectly reconstructed feature can never favour the noise channel.
        """
        s2 = self.resid_var
        n2 = self.sigma2_tilde + s2
        clean = -0.5 * np.log(s2) - 0.5 * (v - recon) ** 2 / s2
        noise = -0.5 * np.log(n2) - 0.5 * (v - self.b_tilde) ** 2 / n2
        return noise - clean


def _ew_weights(n: int, decay: float) -> np.ndarray:
    # weight of row a after folding rows 0..n-1 one at a time
    return (1.0 - decay) * decay ** np.arange(n - 1, -1, -1, dtype=float)


def gate_from_reconstruction(v: np.ndarray, recon: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """g_i = 0 where the noise channel beats the clean channel by more than the odds."""
    v = np.asarray(v, dtype=float)
    if not noise.fitted:
        return np.ones_like(v)
    return (noise.log_odds_noise(v, recon) <= math.log(noise.odds)).astype(float)


def infer_gates(v: np.ndarray, z: np.ndarray | None, params: RbmParams, noise: NoiseModel) -> np.ndarray:
    recon_v, _ = reconstruct(v, z, params)
    return gate_from_reconstruction(v, recon_v, noise)


def robust_energy(
    v: np.ndarray,
    v_tilde: np.ndarray,
    h: np.ndarray,
    z: np.ndarray,
    g: np.ndarray,
    params: RbmParams,
    noise_mean: np.ndarray,
    noise_var: np.ndarray,
):
    """Gated energy: 0.5*sum g (v - v~)^2 + E(v,h,z) + 0.5*sum (v~ - b~)^2 / sigma~^2."""
    noise_var = np.asarray(noise_var, dtype=float)
    if np.any(noise_var <= 0):
        raise ValueError("noise variances must be strictly positive")
    v = np.asarray(v, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    gate_term = 0.5 * np.sum(np.asarray(g) * (v - v_tilde) ** 2, axis=-1)
    noise_term = 0.5 * np.sum((v_tilde - noise_mean) ** 2 / noise_var, axis=-1)
    return gate_term + energy(v, h, z, params) + noise_term
