"""Checkpoint format: raw little-endian float32 parameters plus a JSON manifest.

A checkpoint is a directory:

    manifest.json   architecture config, schedule (with realized eta sequence),
                    step count, seed, and the parameter table
    params.bin      all parameters, concatenated little-endian float32

The parameter table maps each parameter path to its shape and element offset
into params.bin, so the file is readable without torch.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .nets import Denoiser, DiscConfig, NetConfig, TimeAwareDiscriminator
from .schedule import DiffusionSchedule

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    module: torch.nn.Module,
    kind: str,
    arch: dict,
    schedule: DiffusionSchedule,
    step: int,
    seed: int,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = {}
    chunks = []
    offset = 0
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        params[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.size
    (path / "params.bin").write_bytes(b"".join(chunks))
    manifest = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "schedule": schedule.to_manifest(),
        "step": step,
        "seed": seed,
        "params": params,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def _load_state_dict(path: Path, manifest: dict) -> dict[str, torch.Tensor]:
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4")
    state = {}
    for name, meta in manifest["params"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = raw[meta["offset"] : meta["offset"] + n].reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    return state


def load_denoiser(path: str | Path) -> tuple[Denoiser, DiffusionSchedule, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["kind"] != "denoiser":
        raise ValueError(f"checkpoint at {path} holds a {manifest['kind']!r}, expected a denoiser")
    net = Denoiser(NetConfig.from_manifest(manifest["arch"]))
    net.load_state_dict(_load_state_dict(path, manifest))
    net.eval()
    return net, DiffusionSchedule.from_manifest(manifest["schedule"]), manifest


def load_discriminator(path: str | Path) -> tuple[TimeAwareDiscriminator, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["kind"] != "discriminator":
        raise ValueError(f"checkpoint at {path} holds a {manifest['kind']!r}, expected a discriminator")
    disc = TimeAwareDiscriminator(DiscConfig.from_manifest(manifest["arch"]))
    disc.load_state_dict(_load_state_dict(path, manifest))
    disc.eval()
    return disc, manifest
