"""Image quality metrics: PSNR, SSIM, and the high-frequency energy gap.

Data convention is [-1, 1], so the PSNR peak is 2.  The HF-energy of an
image is the fraction of its spectral power at radial frequencies above half
the Nyquist limit (0.25 cycles/pixel); the HF gap |E_hf(SR) - E_hf(HR)| is
the reference-free proxy for missing or hallucinated fine detail.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0  # sentinel for identical images


def psnr(sr: torch.Tensor, hr: torch.Tensor, peak: float = 2.0) -> torch.Tensor:
    """Per-image PSNR in dB: 10 log10(peak^2 / MSE), clamped to [0, PSNR_CAP].

    Identical images report the cap; outputs worse than the peak-to-peak range
    report 0 rather than going negative.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    mse = (sr - hr).square().flatten(1).mean(dim=1)
    out = torch.full_like(mse, PSNR_CAP)
    nz = mse > 0
    out[nz] = (10.0 * torch.log10(peak**2 / mse[nz])).clamp(0.0, PSNR_CAP)
    return out


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, size, size)


def ssim(
    sr: torch.Tensor,
    hr: torch.Tensor,
    data_range: float = 2.0,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> torch.Tensor:
    """Per-image SSIM with a Gaussian window, averaged over channels."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    if sr.shape[-1] < window or sr.shape[-2] < window:
        raise ValueError(f"images smaller than the {window}x{window} SSIM window")
    c = sr.shape[1]
    w = _gaussian_window(window, sigma, sr.dtype).expand(c, 1, window, window)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_x = F.conv2d(sr, w, groups=c)
    mu_y = F.conv2d(hr, w, groups=c)
    var_x = F.conv2d(sr * sr, w, groups=c) - mu_x**2
    var_y = F.conv2d(hr * hr, w, groups=c) - mu_y**2
    cov = F.conv2d(sr * hr, w, groups=c) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).flatten(1).mean(dim=1)


def hf_energy(images: torch.Tensor, cutoff: float = 0.25) -> torch.Tensor:
    """Per-image fraction of spectral power above radial frequency `cutoff`.

    Power is summed over channels; an all-zero image reports 0.
    """
    if images.dim() != 4:
        raise ValueError(f"expected rank-4 input, got shape {tuple(images.shape)}")
    h, wdt = images.shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(wdt)[None, :]
    mask = torch.from_numpy((np.sqrt(fx**2 + fy**2) > cutoff)).to(images.device)
    power = torch.fft.fft2(images).abs().square().sum(dim=1)
    total = power.sum(dim=(1, 2))
    high = (power * mask).sum(dim=(1, 2))
    return torch.where(total > 0, high / total.clamp_min(1e-30), torch.zeros_like(total))


def hf_energy_gap(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Per-image |E_hf(SR) - E_hf(HR)|."""
    return (hf_energy(sr) - hf_energy(hr)).abs()
