"""Synthetic paired LR/HR data: generation, degradation, storage, iteration.

HR images are Gaussian random fields (low-frequency base) mixed with
high-frequency content (checkerboards, thin lines, high-passed noise) so
that high-frequency recovery is actually measurable.  The degradation is
blur -> area downsample -> white noise; z_y is the bicubic upsampling of the
LR image back to HR shape.  Everything is bitwise reproducible from seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

VALUE_CLAMP = 1.5  # post-degradation range guard for lr and zy


@dataclass
class PairedDataset:
    """In-memory dataset of (hr, lr, zy) tensors plus its generation manifest."""

    hr: torch.Tensor
    lr: torch.Tensor
    zy: torch.Tensor
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hr.shape[0] != self.lr.shape[0] or self.hr.shape[0] != self.zy.shape[0]:
            raise ValueError("hr, lr, zy must hold the same number of samples")
        if self.zy.shape != self.hr.shape:
            raise ValueError(f"zy shape {tuple(self.zy.shape)} must equal hr shape {tuple(self.hr.shape)}")

    def __len__(self) -> int:
        return self.hr.shape[0]

    def batches(
        self, batch_size: int, epoch: int, seed: int
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """(hr, zy) batches covering every sample once, shuffled by (epoch, seed)."""
        order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            yield self.hr[idx], self.zy[idx]


def _radial_freq_grid(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fx**2 + fy**2)


def _random_field(rng: np.random.Generator, c: int, h: int, w: int, decay: float = 3.0) -> np.ndarray:
    """Low-frequency Gaussian random field via spectral power-law filtering."""
    white = rng.standard_normal((c, h, w))
    filt = 1.0 / (1.0 + (_radial_freq_grid(h, w) / 0.04) ** decay)
    out = np.fft.ifft2(np.fft.fft2(white, axes=(1, 2)) * filt, axes=(1, 2)).real
    return out / (np.abs(out).max() + 1e-12)


def _checkerboard(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    cell = int(rng.integers(1, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    phase = int(rng.integers(0, 2))
    board = (((yy // cell) + (xx // cell) + phase) % 2).astype(np.float64) * 2.0 - 1.0
    return np.broadcast_to(board, (c, h, w)).copy()


def _thin_lines(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(int(rng.integers(3, 7))):
        theta = rng.uniform(0, math.pi)
        a, b = math.cos(theta), math.sin(theta)
        proj = a * xx + b * yy
        offset = rng.uniform(proj.min(), proj.max())
        out[np.abs(proj - offset) < 0.7] = rng.choice([-1.0, 1.0])
    return np.broadcast_to(out, (c, h, w)).copy()


def _texture_noise(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    white = rng.standard_normal((c, h, w))
    filt = (_radial_freq_grid(h, w) > 0.25).astype(np.float64)
    out = np.fft.ifft2(np.fft.fft2(white, axes=(1, 2)) * filt, axes=(1, 2)).real
    return out / (np.abs(out).max() + 1e-12)


_HF_PARTS = (_checkerboard, _thin_lines, _texture_noise)


def generate_hr_images(
    n: int, hw: int, channels: int, seed: int, hf_mix: float
) -> torch.Tensor:
    """n HR images in [-1, 1]: random-field base plus hf_mix-weighted detail."""
    if not 0.0 <= hf_mix <= 1.0:
        raise ValueError(f"hf_mix must lie in [0, 1], got {hf_mix}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, channels, hw, hw), dtype=np.float64)
    for i in range(n):
        img = (1.0 - hf_mix) * _random_field(rng, channels, hw, hw)
        if hf_mix > 0:
            part = _HF_PARTS[int(rng.integers(0, len(_HF_PARTS)))]
            img = img + hf_mix * part(rng, channels, hw, hw)
        images[i] = img / (np.abs(img).max() + 1e-12)
    return torch.from_numpy(images).float()


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    radius = max(1, int(3.0 * sigma + 0.5))
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype)
    kernel = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = kernel / kernel.sum()
    c = x.shape[1]
    kx = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    return F.conv2d(x, ky, groups=c)


def degrade(
    hr: torch.Tensor,
    scale: int,
    blur_sigma: float,
    noise_sigma: float,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(lr, zy): blur, area-downsample by scale, add white noise; zy = bicubic up."""
    if scale not in (1, 2, 4):
        raise ValueError(f"scale must be one of (1, 2, 4), got {scale}")
    if blur_sigma < 0 or noise_sigma < 0:
        raise ValueError("blur_sigma and noise_sigma must be >= 0")
    if hr.shape[-1] % scale or hr.shape[-2] % scale:
        raise ValueError(f"image size {tuple(hr.shape[-2:])} not divisible by scale {scale}")
    lr = _gaussian_blur(hr, blur_sigma)
    if scale > 1:
        lr = F.avg_pool2d(lr, scale)
    if noise_sigma > 0:
        noise = np.random.default_rng(seed).standard_normal(tuple(lr.shape))
        lr = lr + noise_sigma * torch.from_numpy(noise).to(lr.dtype)
    lr = lr.clamp(-VALUE_CLAMP, VALUE_CLAMP)
    if scale > 1:
        zy = F.interpolate(lr, scale_factor=scale, mode="bicubic", align_corners=False)
        zy = zy.clamp(-VALUE_CLAMP, VALUE_CLAMP)
    else:
        zy = lr.clone()
    return lr, zy


def generate_dataset(
    n: int,
    hw: int = 32,
    scale: int = 4,
    seed: int = 0,
    hf_mix: float = 0.35,
    channels: int = 3,
    blur_sigma: float = 1.2,
    noise_sigma: float = 0.02,
) -> PairedDataset:
    """Deterministic synthetic corpus of n paired samples."""
    if hw % scale:
        raise ValueError(f"hw={hw} must be divisible by scale={scale}")
    hr = generate_hr_images(n, hw, channels, seed, hf_mix)
    if n > 0:
        lr, zy = degrade(hr, scale, blur_sigma, noise_sigma, seed=seed + 1)
    else:
        s = hw // scale
        lr = torch.zeros((0, channels, s, s))
        zy = torch.zeros((0, channels, hw, hw))
    manifest = {
        "n": n,
        "hw": hw,
        "scale": scale,
        "seed": seed,
        "hf_mix": hf_mix,
        "channels": channels,
        "blur_sigma": blur_sigma,
        "noise_sigma": noise_sigma,
    }
    return PairedDataset(hr=hr, lr=lr, zy=zy, manifest=manifest)


def save_dataset(ds: PairedDataset, directory: str | Path, split: str) -> Path:
    """One raw float32 file per split (hr | lr | zy blocks) plus a shared manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = b"".join(
        t.numpy().astype("<f4").tobytes() for t in (ds.hr, ds.lr, ds.zy)
    )
    (directory / f"{split}.f32").write_bytes(blocks)
    manifest_path = directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"splits": {}}
    manifest["splits"][split] = {
        "file": f"{split}.f32",
        "hr_shape": list(ds.hr.shape),
        "lr_shape": list(ds.lr.shape),
        "zy_shape": list(ds.zy.shape),
        **ds.manifest,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return directory


def load_dataset(directory: str | Path, split: str) -> PairedDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not present in {directory}")
    meta = manifest["splits"][split]
    raw = np.frombuffer((directory / meta["file"]).read_bytes(), dtype="<f4")
    tensors = []
    offset = 0
    for key in ("hr_shape", "lr_shape", "zy_shape"):
        shape = tuple(meta[key])
        n = int(np.prod(shape))
        tensors.append(torch.from_numpy(raw[offset : offset + n].reshape(shape).copy()))
        offset += n
    info = {k: v for k, v in meta.items() if k not in ("file", "hr_shape", "lr_shape", "zy_shape")}
    return PairedDataset(hr=tensors[0], lr=tensors[1], zy=tensors[2], manifest=info)
