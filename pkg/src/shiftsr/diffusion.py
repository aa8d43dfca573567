"""Forward noising, reverse sampling, and the noise reparameterization.

All image tensors are rank-4 (batch, channels, height, width).  z_y is the
bicubically upsampled LR image, already at HR shape.  Timesteps are plain
ints shared across the batch; schedule coefficients enter as python floats,
so tensor dtype (float32 for training, float64 for identity tests) is
preserved throughout.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .schedule import DiffusionSchedule, reverse_coeffs, transition_coeffs


def _check_image(x: torch.Tensor, name: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must be rank-4 (B, C, H, W), got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")


def _check_same_shape(*named: tuple[str, torch.Tensor]) -> None:
    ref_name, ref = named[0]
    for name, x in named[1:]:
        if x.shape != ref.shape:
            raise ValueError(
                f"shape mismatch: {name} {tuple(x.shape)} vs {ref_name} {tuple(ref.shape)}"
            )


def forward_sample(
    s: DiffusionSchedule,
    z0: torch.Tensor,
    zy: torch.Tensor,
    t: int,
    eps: torch.Tensor,
) -> torch.Tensor:
    """z_t = z0 + eta_t (zy - z0) + sqrt(eta_t) kappa eps."""
    s.check_step(t)
    _check_image(z0, "z0")
    _check_same_shape(("z0", z0), ("zy", zy), ("eps", eps))
    eta = float(s.eta[t])
    return z0 + eta * (zy - z0) + math.sqrt(eta) * s.kappa * eps


def reverse_step(
    s: DiffusionSchedule,
    z_t: torch.Tensor,
    z0_hat: torch.Tensor,
    zy: torch.Tensor,
    t: int,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step t -> t-1.

    Without eps this is the deterministic form z_{t-1} = k_t z0_hat + m_t z_t
    + j_t zy.  With eps it is a sample of the stochastic posterior with mean
    (eta_{t-1}/eta_t) z_t + (alpha_t/eta_t) z0_hat and variance
    kappa^2 (eta_{t-1}/eta_t) alpha_t.
    """
    s.check_step(t)
    _check_image(z_t, "z_t")
    _check_same_shape(("z_t", z_t), ("z0_hat", z0_hat), ("zy", zy))
    if eps is None:
        k, m, j = reverse_coeffs(s, t)
        return k * z0_hat + m * z_t + j * zy
    _check_same_shape(("z_t", z_t), ("eps", eps))
    eta_prev, eta = float(s.eta[t - 1]), float(s.eta[t])
    alpha = s.alpha_at(t)
    mean = (eta_prev / eta) * z_t + (alpha / eta) * z0_hat
    std = s.kappa * math.sqrt(eta_prev * alpha / eta)
    return mean + std * eps


def predicted_noise(
    s: DiffusionSchedule,
    z_t: torch.Tensor,
    z0_hat: torch.Tensor,
    zy: torch.Tensor,
    t: int,
) -> torch.Tensor:
    """Invert the forward reparameterization: the eps implied by (z_t, z0_hat).

    eps_hat = (z_t - (z0_hat + eta_t (zy - z0_hat))) / (sqrt(eta_t) kappa)
    """
    s.check_step(t)
    _check_image(z_t, "z_t")
    _check_same_shape(("z_t", z_t), ("z0_hat", z0_hat), ("zy", zy))
    eta = float(s.eta[t])
    return (z_t - (z0_hat + eta * (zy - z0_hat))) / (math.sqrt(eta) * s.kappa)


def terminal_state(s: DiffusionSchedule, zy: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Initial sampler state z_T = zy + sqrt(eta_T) kappa eps.

    With eta_T ~ 1 the clean-image residual (1 - eta_T) z0 is negligible, so
    inference needs no HR image.
    """
    _check_image(zy, "zy")
    _check_same_shape(("zy", zy), ("eps", eps))
    return zy + math.sqrt(float(s.eta[s.T])) * s.kappa * eps


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T down to 1 (inclusive ends)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.linspace(T, 1, steps).round().astype(int))[::-1]
    return [int(t) for t in ts]


def teacher_sample(
    denoise_fn: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    s: DiffusionSchedule,
    zy: torch.Tensor,
    eps: torch.Tensor,
    deterministic: bool = True,
    steps: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Multi-step rollout from z_T down to the clean-image estimate.

    denoise_fn(z_t, zy, t) must return the z0 prediction at step t.  steps=None
    walks every timestep T..1; a smaller count jumps between evenly spaced
    levels using the same closed-form coefficients.  The stochastic branch
    draws its per-step noise from `generator`.  No gradient flows out of here.
    """
    with torch.no_grad():
        z = terminal_state(s, zy, eps)
        ts = sampling_timesteps(s.T, s.T if steps is None else steps)
        for i, t in enumerate(ts):
            z0_hat = denoise_fn(z, zy, t)
            _check_same_shape(("z_t", z), ("z0_hat", z0_hat))
            next_adjacent = i + 1 < len(ts) and ts[i + 1] == t - 1
            if deterministic and next_adjacent:
                z = reverse_step(s, z, z0_hat, zy, t)
            elif deterministic:
                eta_prev = float(s.eta[ts[i + 1]]) if i + 1 < len(ts) else float(s.eta[0])
                k, m, j = transition_coeffs(eta_prev, float(s.eta[t]))
                z = k * z0_hat + m * z + j * zy
            else:
                if not next_adjacent and i + 1 < len(ts):
                    raise ValueError("stochastic sampling supports only steps=T (adjacent jumps)")
                step_eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
                z = reverse_step(s, z, z0_hat, zy, t, eps=step_eps)
        return z
