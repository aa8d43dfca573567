"""Teacher pre-training and the single-step distillation loop.

The distillation iteration follows the standard alternating order: generate
(student one-step + teacher multi-step from the same terminal state), update
the discriminator on hinge loss, then update the student on
vanilla distillation + score distillation + adversarial feedback.

Determinism contract: given a config (and its seed) every run on one device
is bitwise reproducible.  All sampling goes through one torch.Generator, and
module initialization is seeded explicitly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from . import diffusion
from .checkpoint import save_checkpoint
from .data import PairedDataset
from .losses import (
    adv_disc_loss,
    adv_gen_loss,
    hsd_loss,
    hsd_t_max,
    sds_loss,
    teacher_loss,
    total_gen_loss,
    vanilla_distill_loss,
)
from .nets import Denoiser, DiscConfig, NetConfig, TimeAwareDiscriminator, denoise, discriminate, extract_features
from .schedule import DiffusionSchedule, build_schedule

SEED_ENV_VAR = "SHIFTSR_SEED"


class NonFiniteLossError(RuntimeError):
    """Raised when any training loss turns NaN/Inf; the batch is dumped first."""

    def __init__(self, message: str, dump_dir: Path | None):
        super().__init__(message + (f" (diagnostics: {dump_dir})" if dump_dir else ""))
        self.dump_dir = dump_dir


@dataclass
class TrainConfig:
    # run
    steps: int = 3000
    batch_size: int = 16
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    lambda1: float = 1.0
    lambda2: float = 0.02
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 100
    grad_clip: float = 1.0
    # schedule
    T: int = 15
    kappa: float = 2.0
    eta_min: float = 0.001
    eta_max: float = 0.9999
    eta_p: float = 0.3
    # distillation behavior
    deterministic_teacher: bool = True
    score_mode: str = "hsd"  # "hsd" or "sds"
    time_aware_disc: bool = True
    resample_adv: bool = False  # fresh (t, eps) for the generator's adversarial term
    weighted_teacher_loss: bool = False
    # architecture
    image_channels: int = 3
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_scale: int = 2
    temb_dim: int = 128
    head_width: int = 64

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.score_mode not in ("hsd", "sds"):
            raise ValueError(f"score_mode must be 'hsd' or 'sds', got {self.score_mode!r}")
        self.channel_mults = tuple(self.channel_mults)

    def build_schedule(self) -> DiffusionSchedule:
        return build_schedule(self.T, self.kappa, self.eta_min, self.eta_max, self.eta_p)

    def net_config(self) -> NetConfig:
        return NetConfig(
            image_channels=self.image_channels,
            base_width=self.base_width,
            channel_mults=self.channel_mults,
            blocks_per_scale=self.blocks_per_scale,
            temb_dim=self.temb_dim,
            num_steps=self.T,
        )

    def disc_config(self) -> DiscConfig:
        return DiscConfig(
            feature_channels=self.net_config().widths,
            head_width=self.head_width,
            temb_dim=self.temb_dim,
            time_aware=self.time_aware_disc,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Load from JSON; the SHIFTSR_SEED environment variable overrides seed."""
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            cfg.seed = int(env_seed)
        return cfg


def _batch_stream(dataset: PairedDataset, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from dataset.batches(batch_size, epoch, seed)
        epoch += 1


def _dump_batch(out_dir: Path | None, step: int, tensors: dict[str, torch.Tensor]) -> Path | None:
    if out_dir is None:
        return None
    dump_dir = Path(out_dir) / "diagnostics" / f"step{step:06d}"
    dump_dir.mkdir(parents=True, exist_ok=True)
    meta = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        (dump_dir / f"{name}.f32").write_bytes(arr.tobytes())
        meta[name] = {"shape": list(arr.shape)}
    (dump_dir / "manifest.json").write_text(json.dumps({"step": step, "tensors": meta}, indent=1))
    return dump_dir


def _check_finite(value: float, label: str, step: int, out_dir, tensors) -> None:
    if not math.isfinite(value):
        dump_dir = _dump_batch(Path(out_dir) if out_dir else None, step, tensors)
        raise NonFiniteLossError(f"{label} is non-finite ({value}) at step {step}", dump_dir)


class _CsvLog:
    def __init__(self, path: Path | None, header: list[str]):
        self.rows: list[list[float]] = []
        self._file = None
        self._writer = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "w", newline="")
            self._writer = csv.writer(self._file)
            self._writer.writerow(header)

    def append(self, row: list[float]) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


def pretrain_teacher(
    cfg: TrainConfig,
    dataset: PairedDataset,
    out_dir: str | Path | None = None,
    device: str = "cpu",
) -> tuple[Denoiser, DiffusionSchedule, list[float]]:
    """Train the multi-step denoiser on the unweighted regression objective."""
    out_dir = Path(out_dir) if out_dir is not None else None
    s = cfg.build_schedule()
    torch.manual_seed(cfg.seed)
    net = Denoiser(cfg.net_config()).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_gen)
    gen = torch.Generator(device="cpu").manual_seed(cfg.seed)
    stream = _batch_stream(dataset, cfg.batch_size, cfg.seed)
    log = _CsvLog(out_dir / "teacher_log.csv" if out_dir else None, ["step", "loss"])

    for step in range(1, cfg.steps + 1):
        hr, zy = next(stream)
        hr, zy = hr.to(device), zy.to(device)
        t = int(torch.randint(1, cfg.T + 1, (1,), generator=gen).item())
        eps = torch.randn(hr.shape, generator=gen).to(device)
        z_t = diffusion.forward_sample(s, hr, zy, t, eps)
        loss = teacher_loss(s, denoise(net, z_t, zy, t), hr, t, weighted=cfg.weighted_teacher_loss)
        _check_finite(loss.item(), "teacher loss", step, out_dir, {"hr": hr, "zy": zy, "eps": eps, "z_t": z_t})
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        log.append([step, loss.item()])
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[teacher] step {step}/{cfg.steps} loss {loss.item():.5f}")
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"teacher_step{step:06d}", net, "denoiser",
                            net.config.to_manifest(), s, step, cfg.seed)
    log.close()
    if out_dir:
        save_checkpoint(out_dir / "teacher", net, "denoiser",
                        net.config.to_manifest(), s, cfg.steps, cfg.seed)
    net.eval()
    return net, s, [row[1] for row in log.rows]


def distill(
    cfg: TrainConfig,
    teacher: Denoiser,
    dataset: PairedDataset,
    out_dir: str | Path | None = None,
    device: str = "cpu",
) -> tuple[Denoiser, TimeAwareDiscriminator, list[list[float]]]:
    """Distill the frozen teacher into a one-step student with a time-aware critic.

    Per iteration: (1) student one-step and teacher multi-step outputs from
    the same terminal state; (2) discriminator hinge update at a fresh t with
    the iteration's eps shared between real and fake branches; (3) student
    update on distill + score-distillation + adversarial losses, the
    adversarial term re-evaluated with gradient at the same (t, eps).
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    s = cfg.build_schedule()
    if teacher.config.num_steps != cfg.T:
        raise ValueError(f"teacher was built for T={teacher.config.num_steps}, config says T={cfg.T}")
    teacher = teacher.to(device)
    teacher.eval()
    teacher.requires_grad_(False)

    torch.manual_seed(cfg.seed)
    student = Denoiser(teacher.config).to(device)
    student.load_state_dict(teacher.state_dict())  # bit-exact copy init
    disc = TimeAwareDiscriminator(
        DiscConfig(
            feature_channels=teacher.config.widths,
            head_width=cfg.head_width,
            temb_dim=cfg.temb_dim,
            time_aware=cfg.time_aware_disc,
        )
    ).to(device)

    opt_g = torch.optim.Adam(student.parameters(), lr=cfg.lr_gen)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    gen = torch.Generator(device="cpu").manual_seed(cfg.seed)
    stream = _batch_stream(dataset, cfg.batch_size, cfg.seed)
    log = _CsvLog(
        out_dir / "distill_log.csv" if out_dir else None,
        ["step", "l_distill", "l_hsd", "l_adv_g", "l_adv_d", "total"],
    )
    t_hi = hsd_t_max(cfg.T)

    for step in range(1, cfg.steps + 1):
        hr, zy = next(stream)
        hr, zy = hr.to(device), zy.to(device)
        eps = torch.randn(hr.shape, generator=gen).to(device)
        z_terminal = diffusion.terminal_state(s, zy, eps)
        z0_stu = denoise(student, z_terminal, zy, cfg.T)
        z0_tch = diffusion.teacher_sample(teacher, s, zy, eps, deterministic=cfg.deterministic_teacher)

        # discriminator update: real and fake noised with the same eps
        t_disc = int(torch.randint(1, cfg.T + 1, (1,), generator=gen).item())
        with torch.no_grad():
            zt_fake = diffusion.forward_sample(s, z0_stu.detach(), zy, t_disc, eps)
            zt_real = diffusion.forward_sample(s, hr, zy, t_disc, eps)
            feats_fake = extract_features(teacher, zt_fake, zy, t_disc)
            feats_real = extract_features(teacher, zt_real, zy, t_disc)
        scores_fake, _ = discriminate(disc, feats_fake, t_disc)
        scores_real, _ = discriminate(disc, feats_real, t_disc)
        l_adv_d = adv_disc_loss(scores_fake, scores_real)
        _check_finite(l_adv_d.item(), "discriminator loss", step, out_dir,
                      {"hr": hr, "zy": zy, "eps": eps, "z0_stu": z0_stu})
        opt_d.zero_grad()
        l_adv_d.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        opt_d.step()

        # generator update
        l_distill = vanilla_distill_loss(z0_stu, z0_tch)
        t_prime = int(torch.randint(1, t_hi + 1, (1,), generator=gen).item())
        eps_prime = torch.randn(hr.shape, generator=gen).to(device)
        if cfg.lambda1 == 0:
            l_score = z0_stu.new_zeros(())
        elif cfg.score_mode == "hsd":
            l_score = hsd_loss(teacher, s, z0_stu, z0_tch, zy, t_prime, eps_prime)
        else:
            l_score = sds_loss(teacher, s, z0_stu, zy, t_prime, eps_prime)
        if cfg.lambda2 == 0:
            l_adv_g = z0_stu.new_zeros(())
        else:
            if cfg.resample_adv:
                t_adv = int(torch.randint(1, cfg.T + 1, (1,), generator=gen).item())
                eps_adv = torch.randn(hr.shape, generator=gen).to(device)
            else:
                t_adv, eps_adv = t_disc, eps
            disc.requires_grad_(False)
            zt_gen = diffusion.forward_sample(s, z0_stu, zy, t_adv, eps_adv)
            feats_gen = extract_features(teacher, zt_gen, zy, t_adv)
            scores_gen, _ = discriminate(disc, feats_gen, t_adv)
            l_adv_g = adv_gen_loss(scores_gen)
        total = total_gen_loss(l_distill, l_score, l_adv_g, cfg.lambda1, cfg.lambda2)
        for label, val in (("distill loss", l_distill), ("score loss", l_score),
                           ("generator adv loss", l_adv_g), ("total loss", total)):
            _check_finite(val.item(), label, step, out_dir,
                          {"hr": hr, "zy": zy, "eps": eps, "z0_stu": z0_stu, "z0_tch": z0_tch})
        opt_g.zero_grad()
        total.backward()
        disc.requires_grad_(True)
        torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.grad_clip)
        opt_g.step()

        log.append([step, l_distill.item(), l_score.item(), l_adv_g.item(), l_adv_d.item(), total.item()])
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[distill] step {step}/{cfg.steps} distill {l_distill.item():.5f} "
                  f"score {l_score.item():.3e} adv_g {l_adv_g.item():.4f} adv_d {l_adv_d.item():.4f}")
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"student_step{step:06d}", student, "denoiser",
                            student.config.to_manifest(), s, step, cfg.seed)
    log.close()
    if out_dir:
        save_checkpoint(out_dir / "student", student, "denoiser",
                        student.config.to_manifest(), s, cfg.steps, cfg.seed)
        save_checkpoint(out_dir / "disc", disc, "discriminator",
                        disc.config.to_manifest(), s, cfg.steps, cfg.seed)
    student.eval()
    disc.eval()
    return student, disc, log.rows
