"""Residual-shifting noise schedule and its closed-form coefficients.

The forward process drifts a clean image z_0 toward the (upsampled)
low-resolution image z_y while injecting noise:

    z_t = z_0 + eta_t (z_y - z_0) + sqrt(eta_t) * kappa * eps

eta_t increases strictly with t, with eta_0 ~ 0 (clean) and eta_T ~ 1
(fully shifted onto z_y).  All derived coefficients used by the samplers
and losses live here:

    alpha_t = eta_t - eta_{t-1}
    m_t     = sqrt(eta_{t-1} / eta_t)
    j_t     = eta_{t-1} - sqrt(eta_{t-1} * eta_t)
    k_t     = 1 - j_t - m_t                      (deterministic reverse step)
    w_t     = alpha_t / (2 kappa^2 eta_t eta_{t-1})   (denoiser loss weight)
    omega2  = (1/(C*S)) * (1 - eta_t') / (sqrt(eta_t') * kappa)
                                        (high-frequency score-distillation weight)

Everything is computed and stored in float64; consumers may downcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# eta_0 must be (nearly) zero and eta_T (nearly) one for the reverse
# process to start at the LR image and end at the clean image.
ETA0_MAX = 1e-3
ETA_T_MIN = 0.999


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable schedule: eta has length T+1 (index 0..T), alpha length T (index 1..T)."""

    T: int
    kappa: float
    eta: np.ndarray
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if eta.shape != (self.T + 1,):
            raise ValueError(f"eta must have length T+1={self.T + 1}, got {eta.shape}")
        if not np.all(np.diff(eta) > 0):
            raise ValueError("eta must be strictly increasing in t")
        if not eta[0] <= ETA0_MAX:
            raise ValueError(f"eta[0]={eta[0]} exceeds {ETA0_MAX}; must approximate eta_0 -> 0")
        if not eta[self.T] >= ETA_T_MIN:
            raise ValueError(f"eta[T]={eta[self.T]} below {ETA_T_MIN}; must approximate eta_T -> 1")
        if not eta[0] > 0:
            raise ValueError("eta[0] must be positive (a small stand-in for the eta_0 -> 0 limit)")
        eta.setflags(write=False)
        alpha = np.diff(eta)
        alpha.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "alpha", alpha)

    def alpha_at(self, t: int) -> float:
        """alpha_t = eta_t - eta_{t-1}, valid for 1 <= t <= T."""
        self.check_step(t)
        return float(self.alpha[t - 1])

    def check_step(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"timestep t={t} out of range [{lo}, {self.T}]")

    def to_manifest(self) -> dict:
        """JSON-safe dump, written into checkpoint manifests for reproducibility."""
        return {"T": self.T, "kappa": self.kappa, "eta": self.eta.tolist()}

    @classmethod
    def from_manifest(cls, d: dict) -> "DiffusionSchedule":
        return cls(T=int(d["T"]), kappa=float(d["kappa"]), eta=np.asarray(d["eta"], dtype=np.float64))


def build_schedule(
    T: int = 15,
    kappa: float = 2.0,
    eta_min: float = 0.001,
    eta_max: float = 0.9999,
    p: float = 0.3,
) -> DiffusionSchedule:
    """Geometric eta interpolation with curvature exponent p.

    eta_t = eta_min * (eta_max/eta_min) ** (((t-1)/(T-1)) ** p)  for t in 1..T,
    so eta_1 = eta_min and eta_T = eta_max exactly.  eta_0 is placed one
    geometric step below eta_1 (eta_min^2 / eta_max), keeping m_1 and w_1 finite.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0 < eta_min < eta_max < 1):
        raise ValueError(f"need 0 < eta_min < eta_max < 1, got ({eta_min}, {eta_max})")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not p > 0:
        raise ValueError(f"curvature exponent p must be positive, got {p}")

    t = np.arange(1, T + 1, dtype=np.float64)
    frac = ((t - 1.0) / (T - 1.0)) ** p
    eta = np.empty(T + 1, dtype=np.float64)
    eta[0] = eta_min * eta_min / eta_max
    eta[1:] = eta_min * (eta_max / eta_min) ** frac
    return DiffusionSchedule(T=T, kappa=kappa, eta=eta)


def reverse_coeffs(s: DiffusionSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients (k_t, m_t, j_t) of the deterministic reverse step

        z_{t-1} = k_t * z0_hat + m_t * z_t + j_t * z_y.

    They satisfy k_t + m_t + j_t = 1 and m_t sqrt(eta_t) = sqrt(eta_{t-1}).
    """
    s.check_step(t)
    return transition_coeffs(float(s.eta[t - 1]), float(s.eta[t]))


def transition_coeffs(eta_prev: float, eta_cur: float) -> tuple[float, float, float]:
    """(k, m, j) for a deterministic jump from noise level eta_cur down to eta_prev."""
    if not 0 < eta_prev < eta_cur:
        raise ValueError(f"need 0 < eta_prev < eta_cur, got ({eta_prev}, {eta_cur})")
    m = math.sqrt(eta_prev / eta_cur)
    j = eta_prev - math.sqrt(eta_prev * eta_cur)
    k = 1.0 - j - m
    return k, m, j


def loss_weight(s: DiffusionSchedule, t: int) -> float:
    """Denoiser loss weight w_t = alpha_t / (2 kappa^2 eta_t eta_{t-1}).

    Training uses w_t = 1 by default (the weighted objective tends to hurt
    sample quality), but the exact weight is exposed for completeness.
    """
    s.check_step(t)
    return float(s.alpha[t - 1]) / (2.0 * s.kappa**2 * float(s.eta[t]) * float(s.eta[t - 1]))


def hsd_weight(s: DiffusionSchedule, t_prime: int, C: int, S: int) -> float:
    """Weight omega2 of the high-frequency score-distillation gradient.

    omega2 = (1/(C*S)) * (1 - eta_t') / (sqrt(eta_t') * kappa), where C is the
    channel count and S the number of spatial pixels of the supervised tensor.
    """
    s.check_step(t_prime)
    if C < 1 or S < 1:
        raise ValueError(f"C and S must be >= 1, got ({C}, {S})")
    eta = float(s.eta[t_prime])
    return (1.0 - eta) / (math.sqrt(eta) * s.kappa) / (C * S)
