"""Conditional U-Net denoiser and the time-aware latent discriminator.

The teacher and student share the same architecture: a small U-Net that maps
(z_t, z_y, t) -> z0_hat, conditioned on z_y by channel concatenation and on
t by a sinusoidal embedding pushed through two affine layers and injected
into every residual block.

The discriminator never sees pixels.  It scores the frozen teacher encoder's
multi-scale activations, after modulating each scale with (gamma_k, beta_k)
projected from the timestep embedding, one small strided-conv head per scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer timesteps, shape (B, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm_groups(channels: int, preferred: int = 8) -> int:
    g = math.gcd(channels, preferred)
    return max(g, 1)


class ResBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU, and additive timestep injection."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by teacher and student."""

    image_channels: int = 3
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_scale: int = 2
    temb_dim: int = 128
    num_steps: int = 15

    def __post_init__(self):
        if self.base_width < 1 or self.image_channels < 1:
            raise ValueError("channel counts must be positive")
        if len(self.channel_mults) < 1:
            raise ValueError("need at least one resolution scale")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    def to_manifest(self) -> dict:
        return {
            "image_channels": self.image_channels,
            "base_width": self.base_width,
            "channel_mults": list(self.channel_mults),
            "blocks_per_scale": self.blocks_per_scale,
            "temb_dim": self.temb_dim,
            "num_steps": self.num_steps,
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "NetConfig":
        return cls(
            image_channels=int(d["image_channels"]),
            base_width=int(d["base_width"]),
            channel_mults=tuple(int(m) for m in d["channel_mults"]),
            blocks_per_scale=int(d["blocks_per_scale"]),
            temb_dim=int(d["temb_dim"]),
            num_steps=int(d["num_steps"]),
        )


class Denoiser(nn.Module):
    """U-Net predicting z0_hat from (z_t, z_y, t); output shape equals z_t's."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        ch = config.widths
        td = config.temb_dim
        nb = config.blocks_per_scale

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(2 * config.image_channels, ch[0], 3, padding=1)

        self.enc = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            blocks = nn.ModuleList()
            for _ in range(nb):
                blocks.append(ResBlock(prev, c, td))
                prev = c
            self.enc.append(blocks)
            if i + 1 < len(ch):
                self.downs.append(nn.Conv2d(c, ch[i + 1], 3, stride=2, padding=1))
                prev = ch[i + 1]

        self.mid = ResBlock(ch[-1], ch[-1], td)

        self.dec = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            c = ch[i]
            blocks = nn.ModuleList()
            for b in range(nb):
                blocks.append(ResBlock(prev + (c if b == 0 else 0), c, td))
                prev = c
            self.dec.append(blocks)
            if i > 0:
                self.ups.append(nn.Conv2d(c, ch[i - 1], 3, padding=1))
                prev = ch[i - 1]

        self.head_norm = nn.GroupNorm(_norm_groups(ch[0]), ch[0])
        self.head = nn.Conv2d(ch[0], config.image_channels, 3, padding=1)

    def _check_inputs(self, z_t: torch.Tensor, zy: torch.Tensor, t: int, t_min: int) -> None:
        if z_t.dim() != 4 or zy.shape != z_t.shape:
            raise ValueError(
                f"z_t and zy must be rank-4 with identical shapes, got "
                f"{tuple(z_t.shape)} vs {tuple(zy.shape)}"
            )
        if z_t.shape[1] != self.config.image_channels:
            raise ValueError(
                f"expected {self.config.image_channels} channels, got {z_t.shape[1]}"
            )
        if not t_min <= t <= self.config.num_steps:
            raise ValueError(f"t={t} out of range [{t_min}, {self.config.num_steps}]")

    def _temb(self, t: int, batch: int, like: torch.Tensor) -> torch.Tensor:
        ts = torch.full((batch,), float(t), dtype=like.dtype, device=like.device)
        return self.time_mlp(sinusoidal_time_embedding(ts, self.config.temb_dim))

    def _encode(self, z_t, zy, temb):
        h = self.stem(torch.cat([z_t, zy], dim=1))
        feats = []
        for i, blocks in enumerate(self.enc):
            for block in blocks:
                h = block(h, temb)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats, h

    def forward(self, z_t: torch.Tensor, zy: torch.Tensor, t: int) -> torch.Tensor:
        self._check_inputs(z_t, zy, t, t_min=1)
        temb = self._temb(t, z_t.shape[0], z_t)
        feats, h = self._encode(z_t, zy, temb)
        h = self.mid(feats[-1], temb)
        for i, blocks in enumerate(self.dec):
            skip = feats[len(feats) - 1 - i]
            h = blocks[0](torch.cat([h, skip], dim=1), temb)
            for block in blocks[1:]:
                h = block(h, temb)
            if i < len(self.ups):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[i](h)
        return self.head(F.silu(self.head_norm(h)))

    def encoder_features(self, z_t: torch.Tensor, zy: torch.Tensor, t: int) -> list[torch.Tensor]:
        """Per-scale encoder activations, spatial size halving scale to scale.

        t=0 is allowed here (un-noised probes); the denoising path needs t >= 1.
        """
        self._check_inputs(z_t, zy, t, t_min=0)
        temb = self._temb(t, z_t.shape[0], z_t)
        feats, _ = self._encode(z_t, zy, temb)
        return feats


def denoise(net: Denoiser, z_t: torch.Tensor, zy: torch.Tensor, t: int) -> torch.Tensor:
    """z0 prediction at step t; differentiable w.r.t. parameters and z_t."""
    return net(z_t, zy, t)


def extract_features(teacher: Denoiser, z_t: torch.Tensor, zy: torch.Tensor, t: int) -> list[torch.Tensor]:
    """Frozen-teacher encoder pyramid for the discriminator.

    Gradient may flow into z_t (the generator's adversarial update needs it);
    the caller is responsible for having frozen the teacher's parameters.
    """
    return teacher.encoder_features(z_t, zy, t)


class _TimeModulation(nn.Module):
    """Projects the timestep embedding to per-channel (gamma, beta).

    The output layer is zero-initialized, so modulation starts as the identity
    and the discriminator is time-agnostic until training breaks the symmetry.
    """

    def __init__(self, temb_dim: int, channels: int):
        super().__init__()
        self.hidden = nn.Linear(temb_dim, temb_dim)
        self.out = nn.Linear(temb_dim, 2 * channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, temb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.out(F.silu(self.hidden(temb))).chunk(2, dim=-1)
        return gamma, beta


class _ScaleHead(nn.Module):
    """Two strided convs then a global average down to one score per sample."""

    def __init__(self, c_in: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        return self.conv2(h).mean(dim=(1, 2, 3))


@dataclass(frozen=True)
class DiscConfig:
    feature_channels: tuple[int, ...] = (16, 32, 64)
    head_width: int = 64
    temb_dim: int = 128
    time_aware: bool = True

    def to_manifest(self) -> dict:
        return {
            "feature_channels": list(self.feature_channels),
            "head_width": self.head_width,
            "temb_dim": self.temb_dim,
            "time_aware": self.time_aware,
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "DiscConfig":
        return cls(
            feature_channels=tuple(int(c) for c in d["feature_channels"]),
            head_width=int(d["head_width"]),
            temb_dim=int(d["temb_dim"]),
            time_aware=bool(d["time_aware"]),
        )


class TimeAwareDiscriminator(nn.Module):
    """Per-scale heads over modulated teacher features.

    Each scale k computes F_hat_k = Norm(F_k) * (1 + gamma_k(t)) + beta_k(t)
    with a parameter-free group norm, then scores F_hat_k with its own head.
    With time_aware=False the modulation is dropped entirely (plain latent
    discriminator baseline).
    """

    def __init__(self, config: DiscConfig):
        super().__init__()
        self.config = config
        if config.time_aware:
            self.mods = nn.ModuleList(
                _TimeModulation(config.temb_dim, c) for c in config.feature_channels
            )
        else:
            self.mods = None
        self.heads = nn.ModuleList(
            _ScaleHead(c, config.head_width) for c in config.feature_channels
        )

    def forward(self, feats: list[torch.Tensor], t: int) -> torch.Tensor:
        """Per-scale scores, shape (B, K)."""
        if len(feats) != len(self.heads):
            raise ValueError(
                f"feature pyramid has {len(feats)} scales, discriminator expects {len(self.heads)}"
            )
        for k, (f, c) in enumerate(zip(feats, self.config.feature_channels)):
            if f.shape[1] != c:
                raise ValueError(f"scale {k}: expected {c} channels, got {f.shape[1]}")
        temb = None
        if self.mods is not None:
            ts = torch.full((feats[0].shape[0],), float(t), dtype=feats[0].dtype, device=feats[0].device)
            temb = sinusoidal_time_embedding(ts, self.config.temb_dim)
        scores = []
        for k, f in enumerate(feats):
            h = F.group_norm(f, _norm_groups(f.shape[1]))
            if self.mods is not None:
                gamma, beta = self.mods[k](temb)
                h = h * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]
            scores.append(self.heads[k](h))
        return torch.stack(scores, dim=1)


def discriminate(
    disc: TimeAwareDiscriminator, feats: list[torch.Tensor], t: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """(per-scale scores (B, K), their mean over scales (B,))."""
    scores = disc(feats, t)
    return scores, scores.mean(dim=1)
