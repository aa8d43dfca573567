"""Training objectives with explicit gradient contracts.

Every loss returns a scalar tensor.  MSE losses are means over all elements
(B*C*H*W).  The score-distillation surrogates follow the stop-gradient
pattern: the residual is computed without autograd, and the returned scalar
is an inner product whose gradient w.r.t. the student output is exactly the
intended update direction (the denoiser Jacobian is deliberately omitted).
"""

from __future__ import annotations

import torch

from . import diffusion
from .nets import Denoiser, denoise
from .schedule import DiffusionSchedule, hsd_weight, loss_weight


def _check_match(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {name_a} {tuple(a.shape)} vs {name_b} {tuple(b.shape)}")


def hsd_t_max(T: int) -> int:
    """Largest small-step noise level used by score distillation: max(1, T//5)."""
    return max(1, T // 5)


def teacher_loss(
    s: DiffusionSchedule,
    z0_hat: torch.Tensor,
    z0: torch.Tensor,
    t: int,
    weighted: bool = False,
) -> torch.Tensor:
    """Denoiser regression loss: mean squared error, optionally times w_t.

    The unweighted form (w_t = 1) is the training default.
    """
    _check_match(z0_hat, z0, "z0_hat", "z0")
    mse = (z0_hat - z0).square().mean()
    if weighted:
        mse = mse * loss_weight(s, t)
    return mse


def vanilla_distill_loss(z0_stu: torch.Tensor, z0_tch: torch.Tensor) -> torch.Tensor:
    """MSE between the student's one-step output and the teacher's rollout.

    The teacher target is detached here, so gradient reaches only z0_stu;
    the analytic gradient is 2 (z0_stu - z0_tch) / N.
    """
    _check_match(z0_stu, z0_tch, "z0_stu", "z0_tch")
    return (z0_stu - z0_tch.detach()).square().mean()


def _channels_pixels(x: torch.Tensor) -> tuple[int, int]:
    return x.shape[1], x.shape[2] * x.shape[3]


def hsd_residual(
    teacher: Denoiser,
    s: DiffusionSchedule,
    z0_stu: torch.Tensor,
    z0_tch: torch.Tensor,
    zy: torch.Tensor,
    t_prime: int,
    eps_prime: torch.Tensor,
) -> torch.Tensor:
    """Stop-gradient residual of high-frequency score distillation.

    Both outputs are noised to the same small level t' with shared eps', then
    denoised by the frozen teacher:

        r = z0_stu - z0_tch + teacher(z_t'^tch) - teacher(z_t'^stu)

    r vanishes exactly when the student output matches the teacher output.
    """
    if not 1 <= t_prime <= hsd_t_max(s.T):
        raise ValueError(f"t_prime={t_prime} outside the small-step range [1, {hsd_t_max(s.T)}]")
    _check_match(z0_stu, z0_tch, "z0_stu", "z0_tch")
    _check_match(z0_stu, eps_prime, "z0_stu", "eps_prime")
    with torch.no_grad():
        z0_stu = z0_stu.detach()
        z0_tch = z0_tch.detach()
        zt_stu = diffusion.forward_sample(s, z0_stu, zy, t_prime, eps_prime)
        zt_tch = diffusion.forward_sample(s, z0_tch, zy, t_prime, eps_prime)
        return z0_stu - z0_tch + denoise(teacher, zt_tch, zy, t_prime) - denoise(teacher, zt_stu, zy, t_prime)


def hsd_loss(
    teacher: Denoiser,
    s: DiffusionSchedule,
    z0_stu: torch.Tensor,
    z0_tch: torch.Tensor,
    zy: torch.Tensor,
    t_prime: int,
    eps_prime: torch.Tensor,
) -> torch.Tensor:
    """High-frequency score-distillation surrogate.

    Returns omega2 * sum(sg(r) * z0_stu) / B, so the per-sample gradient
    w.r.t. z0_stu is exactly omega2 * r.  omega2 already carries the 1/(C*S)
    reduction, hence the extra average runs over the batch only.
    """
    r = hsd_residual(teacher, s, z0_stu, z0_tch, zy, t_prime, eps_prime)
    C, S = _channels_pixels(z0_stu)
    w2 = hsd_weight(s, t_prime, C, S)
    return w2 * (r * z0_stu).sum() / z0_stu.shape[0]


def hsd_score_difference(
    teacher: Denoiser,
    s: DiffusionSchedule,
    z0_stu: torch.Tensor,
    z0_tch: torch.Tensor,
    zy: torch.Tensor,
    t_prime: int,
    eps_prime: torch.Tensor,
) -> torch.Tensor:
    """Raw weighted score difference, the un-simplified route.

    Computes omega * (eps_hat(z_t'^stu) - eps_hat(z_t'^tch)) elementwise via
    the noise reparameterization.  Given shared eps', this equals
    hsd_weight * hsd_residual identically; it is kept as an independent path
    so the simplification stays checkable.
    """
    if not 1 <= t_prime <= hsd_t_max(s.T):
        raise ValueError(f"t_prime={t_prime} outside the small-step range [1, {hsd_t_max(s.T)}]")
    _check_match(z0_stu, z0_tch, "z0_stu", "z0_tch")
    C, S = _channels_pixels(z0_stu)
    omega = 1.0 / (C * S)
    with torch.no_grad():
        z0_stu = z0_stu.detach()
        z0_tch = z0_tch.detach()
        zt_stu = diffusion.forward_sample(s, z0_stu, zy, t_prime, eps_prime)
        zt_tch = diffusion.forward_sample(s, z0_tch, zy, t_prime, eps_prime)
        eps_stu = diffusion.predicted_noise(s, zt_stu, denoise(teacher, zt_stu, zy, t_prime), zy, t_prime)
        eps_tch = diffusion.predicted_noise(s, zt_tch, denoise(teacher, zt_tch, zy, t_prime), zy, t_prime)
        return omega * (eps_stu - eps_tch)


def sds_loss(
    teacher: Denoiser,
    s: DiffusionSchedule,
    z0_stu: torch.Tensor,
    zy: torch.Tensor,
    t_prime: int,
    eps_prime: torch.Tensor,
) -> torch.Tensor:
    """Plain score-distillation baseline (the ablation arm).

    The target is the injected noise itself: the stop-gradient residual is
    omega * (eps_hat(z_t'^stu) - eps'), applied through the same inner-product
    surrogate as hsd_loss (average over batch).
    """
    if not 1 <= t_prime <= hsd_t_max(s.T):
        raise ValueError(f"t_prime={t_prime} outside the small-step range [1, {hsd_t_max(s.T)}]")
    _check_match(z0_stu, eps_prime, "z0_stu", "eps_prime")
    C, S = _channels_pixels(z0_stu)
    omega = 1.0 / (C * S)
    with torch.no_grad():
        z0_det = z0_stu.detach()
        zt = diffusion.forward_sample(s, z0_det, zy, t_prime, eps_prime)
        eps_hat = diffusion.predicted_noise(s, zt, denoise(teacher, zt, zy, t_prime), zy, t_prime)
        r = eps_hat - eps_prime
    return omega * (r * z0_stu).sum() / z0_stu.shape[0]


def adv_gen_loss(scores: torch.Tensor) -> torch.Tensor:
    """Generator adversarial loss: -mean_b sum_k score_k (push scores up)."""
    if scores.numel() == 0:
        raise ValueError("empty score tensor")
    return -scores.sum(dim=1).mean()


def adv_disc_loss(scores_fake: torch.Tensor, scores_real: torch.Tensor) -> torch.Tensor:
    """Hinge loss: mean_b sum_k [max(0, 1 + fake_k) + max(0, 1 - real_k)]."""
    if scores_fake.shape[1] != scores_real.shape[1]:
        raise ValueError(
            f"scale-count mismatch: fake {scores_fake.shape[1]} vs real {scores_real.shape[1]}"
        )
    fake_term = torch.relu(1.0 + scores_fake).sum(dim=1).mean()
    real_term = torch.relu(1.0 - scores_real).sum(dim=1).mean()
    return fake_term + real_term


def total_gen_loss(
    l_distill: torch.Tensor,
    l_hsd: torch.Tensor,
    l_adv: torch.Tensor,
    lambda1: float,
    lambda2: float,
) -> torch.Tensor:
    """l_distill + lambda1 * l_hsd + lambda2 * l_adv."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be non-negative, got ({lambda1}, {lambda2})")
    return l_distill + lambda1 * l_hsd + lambda2 * l_adv
