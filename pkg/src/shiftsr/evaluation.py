"""Evaluation harness, score-difference probe, and the ablation grid."""

from __future__ import annotations

import dataclasses
import statistics
import sys
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion
from .data import PairedDataset
from .losses import hsd_t_max
from .metrics import hf_energy_gap, psnr, ssim
from .nets import Denoiser, denoise
from .schedule import DiffusionSchedule
from .trainer import TrainConfig, distill


@dataclass
class EvalReport:
    """Per-image and aggregate quality numbers for one sampler configuration."""

    label: str
    steps: int
    psnr: np.ndarray
    ssim: np.ndarray
    hf_gap: np.ndarray
    runtime_per_image: float  # median wall-clock seconds, batch size 1

    @property
    def aggregates(self) -> dict[str, float]:
        out = {}
        for name in ("psnr", "ssim", "hf_gap"):
            vals = getattr(self, name)
            out[f"{name}_mean"] = float(vals.mean())
            out[f"{name}_std"] = float(vals.std())
        return out


def sample_images(
    net: Denoiser,
    s: DiffusionSchedule,
    zy: torch.Tensor,
    steps: int,
    seed: int,
    batch_size: int = 16,
) -> torch.Tensor:
    """Deterministic SR outputs for a stack of conditioning images."""
    gen = torch.Generator(device="cpu").manual_seed(seed)
    outs = []
    for start in range(0, zy.shape[0], batch_size):
        chunk = zy[start : start + batch_size]
        eps = torch.randn(chunk.shape, generator=gen)
        outs.append(diffusion.teacher_sample(net, s, chunk, eps, deterministic=True, steps=steps))
    return torch.cat(outs) if outs else zy[:0]


def evaluate(
    net: Denoiser,
    s: DiffusionSchedule,
    dataset: PairedDataset,
    steps: int,
    seed: int = 0,
    label: str = "model",
    runtime_images: int = 32,
    batch_size: int = 16,
) -> EvalReport:
    """PSNR/SSIM/HF-gap over a dataset plus median per-image wall clock."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    sr = sample_images(net, s, dataset.zy, steps, seed, batch_size)
    report = EvalReport(
        label=label,
        steps=steps,
        psnr=psnr(sr, dataset.hr).numpy(),
        ssim=ssim(sr, dataset.hr).numpy(),
        hf_gap=hf_energy_gap(sr, dataset.hr).numpy(),
        runtime_per_image=_median_runtime(net, s, dataset.zy, steps, seed, runtime_images),
    )
    return report


def _median_runtime(net, s, zy, steps, seed, n_images) -> float:
    n = min(n_images, zy.shape[0])
    if n == 0:
        return 0.0
    gen = torch.Generator(device="cpu").manual_seed(seed)
    times = []
    for i in range(n):
        one = zy[i : i + 1]
        eps = torch.randn(one.shape, generator=gen)
        t0 = time.perf_counter()
        diffusion.teacher_sample(net, s, one, eps, deterministic=True, steps=steps)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def probe_scores(
    teacher: Denoiser,
    student: Denoiser,
    s: DiffusionSchedule,
    dataset: PairedDataset,
    t_list: list[int],
    seed: int = 0,
    teacher_steps: int | None = None,
    include_real: bool = False,
    batch_size: int = 16,
) -> tuple[list[dict], dict[int, torch.Tensor]]:
    """Score-difference probe between teacher and student outputs.

    Both models produce SR outputs (teacher with teacher_steps, student with
    one step); each pair is re-noised to every level t with shared noise and
    denoised by the teacher; the per-t mean |difference| quantifies where the
    student's predictions diverge.  With include_real, the analogous gap
    between denoised-real and real images is reported too.
    """
    for t in t_list:
        s.check_step(t)
    z0_tch = sample_images(teacher, s, dataset.zy, teacher_steps or s.T, seed, batch_size)
    z0_stu = sample_images(student, s, dataset.zy, 1, seed, batch_size)
    gen = torch.Generator(device="cpu").manual_seed(seed + 1)
    rows = []
    maps: dict[int, torch.Tensor] = {}
    with torch.no_grad():
        for t in t_list:
            diffs = []
            real_gaps = []
            gap_maps = []
            for start in range(0, len(dataset), batch_size):
                sl = slice(start, start + batch_size)
                zy, hr = dataset.zy[sl], dataset.hr[sl]
                eps = torch.randn(hr.shape, generator=gen)
                d_tch = denoise(teacher, diffusion.forward_sample(s, z0_tch[sl], zy, t, eps), zy, t)
                d_stu = denoise(teacher, diffusion.forward_sample(s, z0_stu[sl], zy, t, eps), zy, t)
                gap = (d_tch - d_stu).abs()
                diffs.append(gap.mean().item() * gap.numel())
                gap_maps.append(gap.mean(dim=1))
                if include_real:
                    d_real = denoise(teacher, diffusion.forward_sample(s, hr, zy, t, eps), zy, t)
                    real_gaps.append((d_real - hr).abs().mean().item() * hr.numel())
            n_el = dataset.hr.numel()
            row = {"t": t, "mean_abs_diff": sum(diffs) / n_el}
            if include_real:
                row["mean_abs_real_gap"] = sum(real_gaps) / n_el
            rows.append(row)
            maps[t] = torch.cat(gap_maps).mean(dim=0)
    return rows, maps


ABLATION_SETTINGS = (
    ("a", "sds", False),
    ("b", "sds", True),
    ("c", "hsd", False),
    ("ours", "hsd", True),
)


def ablate(
    base_cfg: TrainConfig,
    teacher: Denoiser,
    train_set: PairedDataset,
    eval_set: PairedDataset,
    seeds: list[int],
    out_dir=None,
) -> list[dict]:
    """Distill under the four score-distillation x discriminator settings.

    Each (setting, seed) cell trains independently; failures are reported and
    skipped so the remaining cells still fill the table.  Rows carry
    mean/std of PSNR, SSIM, and HF-gap over the surviving seeds.
    """
    if len(seeds) < 3:
        raise ValueError(f"ablation needs >= 3 seeds, got {len(seeds)}")
    rows = []
    for name, score_mode, time_aware in ABLATION_SETTINGS:
        per_seed = {"psnr": [], "ssim": [], "hf_gap": []}
        for seed in seeds:
            cfg = dataclasses.replace(
                base_cfg, score_mode=score_mode, time_aware_disc=time_aware, seed=seed
            )
            try:
                student, _, _ = distill(cfg, teacher, train_set, out_dir=None)
                rep = evaluate(student, cfg.build_schedule(), eval_set, steps=1,
                               seed=seed, label=f"{name}-seed{seed}", runtime_images=0)
            except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                print(f"warning: ablation cell ({name}, seed={seed}) failed: {exc}", file=sys.stderr)
                continue
            per_seed["psnr"].append(float(rep.psnr.mean()))
            per_seed["ssim"].append(float(rep.ssim.mean()))
            per_seed["hf_gap"].append(float(rep.hf_gap.mean()))
        row = {"setting": name, "score_mode": score_mode, "time_aware": time_aware,
               "n_seeds": len(per_seed["psnr"])}
        for metric, vals in per_seed.items():
            row[f"{metric}_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{metric}_std"] = float(np.std(vals)) if vals else float("nan")
        row["per_seed"] = per_seed
        rows.append(row)
    return rows
