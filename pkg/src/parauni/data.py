"""Synthetic prompt/target datasets.

Each prompt id maps to a short token sequence and a set of target samples:
a prompt-indexed Gaussian bump on an 8x8 grid, normalized to unit RMS, plus
per-sample noise whose scale is the data-quality knob (the high-quality
variant uses a smaller scale).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptinessError
from .seeding import spawn_rng

GRID = 8


@dataclass
class SyntheticDataset:
    prompts: list[list[int]]
    targets: np.ndarray  # [n_prompts, per_prompt, GRID*GRID] float32
    seed: int
    noise: float

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def per_prompt(self) -> int:
        return self.targets.shape[1]

    @property
    def sample_dim(self) -> int:
        return self.targets.shape[2]

    def prompt_tokens(self, prompt_id: int) -> list[int]:
        return self.prompts[prompt_id]


def _bump(prompt_id: int, seed: int) -> np.ndarray:
    rng = spawn_rng("bump", seed, prompt_id)
    cx, cy = rng.uniform(1.0, GRID - 2.0, size=2)
    width = rng.uniform(0.8, 2.0)
    ys, xs = np.mgrid[0:GRID, 0:GRID]
    z = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * width * width))
    flat = z.ravel()
    return (flat / (np.linalg.norm(flat) / np.sqrt(flat.size))).astype(np.float32)


def generate_dataset(
    n_prompts: int,
    per_prompt: int,
    vocab: int,
    seed: int,
    noise: float = 0.1,
    prompt_len_range: tuple[int, int] = (3, 6),
) -> SyntheticDataset:
    if n_prompts < 1:
        raise EmptinessError("dataset needs at least one prompt")
    if per_prompt < 1:
        raise EmptinessError("dataset needs at least one target per prompt")
    prompts = []
    targets = np.zeros((n_prompts, per_prompt, GRID * GRID), dtype=np.float32)
    lo, hi = prompt_len_range
    for pid in range(n_prompts):
        rng = spawn_rng("prompt", seed, pid)
        length = int(rng.integers(lo, hi + 1))
        prompts.append([int(t) for t in rng.integers(0, vocab, size=length)])
        base = _bump(pid, seed)
        for s in range(per_prompt):
            jitter = spawn_rng("target", seed, pid, s).standard_normal(GRID * GRID)
            targets[pid, s] = base + np.float32(noise) * jitter.astype(np.float32)
    return SyntheticDataset(prompts=prompts, targets=targets, seed=seed, noise=noise)


def dataset_checksum(prompts_blob: bytes, targets_blob: bytes) -> str:
    h = hashlib.sha256()
    h.update(prompts_blob)
    h.update(targets_blob)
    return h.hexdigest()


def save_dataset(ds: SyntheticDataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prompts_blob = json.dumps(ds.prompts, separators=(",", ":")).encode("utf-8")
    (out / "prompts.json").write_bytes(prompts_blob)
    with open(out / "targets.npy", "wb") as fh:
        np.save(fh, ds.targets)
    targets_blob = (out / "targets.npy").read_bytes()
    manifest = {
        "prompt_count": ds.n_prompts,
        "samples_per_prompt": ds.per_prompt,
        "sample_dim": ds.sample_dim,
        "seed": ds.seed,
        "noise": ds.noise,
        "checksum": dataset_checksum(prompts_blob, targets_blob),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest


def load_dataset(in_dir) -> SyntheticDataset:
    src = Path(in_dir)
    prompts_blob = (src / "prompts.json").read_bytes()
    targets_blob = (src / "targets.npy").read_bytes()
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    expected = manifest.get("checksum")
    actual = dataset_checksum(prompts_blob, targets_blob)
    if expected != actual:
        raise OSError(f"dataset checksum mismatch in {src}: {actual} != {expected}")
    with open(src / "targets.npy", "rb") as fh:
        targets = np.load(fh)
    return SyntheticDataset(
        prompts=json.loads(prompts_blob.decode("utf-8")),
        targets=targets.astype(np.float32),
        seed=int(manifest["seed"]),
        noise=float(manifest["noise"]),
    )
