"""Three-stage training pipeline over the synthetic task.

Stage 1 aligns the query/LIM pathway to a frozen generator; stage 2
fine-tunes queries, LIM and the generator on the lower-noise dataset;
stage 3 runs group-relative RL sequentially over the configured rewards
with the layer adjustment controller, carrying installed masks from one
reward to the next. Every stage enforces its freezing mask after each
backward pass and logs one metrics record per epoch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import (
    CheckpointData,
    decode_float,
    encode_float,
    load_checkpoint,
    save_checkpoint,
)
from .config import format_config, reward_sequence, stage_lr
from .data import GRID, SyntheticDataset, generate_dataset, load_dataset, save_dataset
from .diffusion import Denoiser, DenoiserConfig, Schedule, fm_loss, linear_schedule
from .errors import ConfigError, InvariantError
from .grpo import GrpoConfig, make_step_mean_fn, policy_update, rollout_group
from .ldam import LdamConfig, LdamController, LdamState
from .lim import LayerMaskSet, Lim, LimConfig, integrate
from .nn import AdamW
from .rewards import RewardKind, get_scorer, grad_norm
from .seeding import derive_seed, spawn_rng
from .tensor import Tensor
from .vlm import Vlm, VlmConfig

STAGE_TRAINABLE = {
    1: ("vlm.queries", "lim."),
    2: ("vlm.queries", "lim.", "denoiser."),
    3: ("vlm.queries", "lim.", "denoiser."),
}


@dataclass
class ModelBundle:
    vlm: Vlm
    lim: Lim
    denoiser: Denoiser
    schedule: Schedule
    prompts: list[list[int]]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.vlm.named_parameters("vlm."))
        out.update(self.lim.named_parameters("lim."))
        out.update(self.denoiser.named_parameters("denoiser."))
        return out

    def prompt_tokens(self, prompt_id: int) -> list[int]:
        return self.prompts[prompt_id]

    def condition(self, prompt_id: int, masks: Optional[LayerMaskSet] = None) -> Tensor:
        feats = self.vlm.forward_collect(self.prompt_tokens(prompt_id))
        return integrate(self.lim, feats, masks)

    def trainable_names(self, stage: int) -> list[str]:
        prefixes = STAGE_TRAINABLE[stage]
        return [
            name
            for name in self.named_parameters()
            if any(name == p or name.startswith(p) for p in prefixes)
        ]

    def set_stage(self, stage: int) -> None:
        trainable = set(self.trainable_names(stage))
        for name, p in self.named_parameters().items():
            p.requires_grad = name in trainable
            p.grad = None

    def assert_freezing(self, stage: int) -> None:
        trainable = set(self.trainable_names(stage))
        for name, p in self.named_parameters().items():
            if name in trainable:
                continue
            if p.grad is not None and np.any(p.grad != 0):
                raise InvariantError(
                    f"frozen parameter {name} received a gradient in stage {stage}"
                )


def build_bundle(cfg: dict, prompts: list[list[int]]) -> ModelBundle:
    seed = int(cfg["run.seed"])
    vlm_cfg = VlmConfig(
        layers=int(cfg["vlm.layers"]),
        width=int(cfg["vlm.width"]),
        heads=int(cfg["vlm.heads"]),
        n_queries=int(cfg["vlm.queries"]),
        vocab=int(cfg["vlm.vocab"]),
        max_prompt_len=int(cfg["vlm.max_prompt_len"]),
    )
    out_width = int(cfg["lim.out_width"])
    lim_cfg = LimConfig(
        width=vlm_cfg.width,
        heads=int(cfg["lim.heads"]),
        blocks=int(cfg["lim.blocks"]),
        out_width=out_width if out_width > 0 else None,
        layer_embed=bool(cfg["lim.layer_embed"]),
        layer_count=vlm_cfg.layers,
    )
    den_cfg = DenoiserConfig(
        sample_dim=GRID * GRID,
        tokens=int(cfg["diffusion.tokens"]),
        width=int(cfg["diffusion.width"]),
        heads=int(cfg["diffusion.heads"]),
        cond_width=lim_cfg.cond_width,
        blocks=int(cfg["diffusion.blocks"]),
    )
    return ModelBundle(
        vlm=Vlm(vlm_cfg, seed),
        lim=Lim(lim_cfg, seed),
        denoiser=Denoiser(den_cfg, seed),
        schedule=linear_schedule(),
        prompts=prompts,
    )


def grpo_config(cfg: dict) -> GrpoConfig:
    return GrpoConfig(
        group_size=int(cfg["grpo.group"]),
        clip_eps=float(cfg["grpo.clip_eps"]),
        lr=float(cfg["grpo.lr"]),
        noise_level=float(cfg["grpo.noise"]),
        steps=int(cfg["grpo.steps"]),
        inner_epochs=int(cfg["grpo.inner"]),
    )


def ldam_config(cfg: dict, bundle: ModelBundle) -> LdamConfig:
    return LdamConfig(
        layer_count=bundle.vlm.config.layers,
        mask_shape=(bundle.vlm.config.n_queries, bundle.lim.config.cond_width),
        spike_factor=float(cfg["ldam.spike_factor"]),
        stagnation_threshold=int(cfg["ldam.threshold"]),
        gamma_base=float(cfg["ldam.gamma"]),
        resample_each_use=bool(cfg["ldam.resample_each_use"]),
    )


# -- data -------------------------------------------------------------------

def gen_data(cfg: dict, out_dir) -> dict:
    """Write the base and high-quality synthetic datasets plus manifests."""
    out = Path(out_dir)
    seed = int(cfg["run.seed"])
    common = dict(
        n_prompts=int(cfg["data.prompts"]),
        per_prompt=int(cfg["data.per_prompt"]),
        vocab=int(cfg["vlm.vocab"]),
        prompt_len_range=(int(cfg["data.prompt_len_min"]), int(cfg["data.prompt_len_max"])),
    )
    base = generate_dataset(seed=derive_seed(seed, "data-base"), noise=float(cfg["data.noise"]), **common)
    hq = generate_dataset(seed=derive_seed(seed, "data-base"), noise=float(cfg["data.hq_noise"]), **common)
    manifests = {
        "base": save_dataset(base, out / "base"),
        "hq": save_dataset(hq, out / "hq"),
    }
    (out / "manifest.json").write_text(json.dumps(manifests, indent=2), encoding="utf-8")
    return manifests


def load_stage_dataset(cfg: dict, stage: int, data_dir=None) -> SyntheticDataset:
    root = Path(data_dir if data_dir is not None else str(cfg["data.dir"]))
    return load_dataset(root / ("hq" if stage == 2 else "base"))


# -- metrics ------------------------------------------------------------------

class MetricsLog:
    """Append-only JSONL metrics, one record per epoch."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


# -- checkpoint glue ----------------------------------------------------------

def bundle_checkpoint(
    bundle: ModelBundle,
    cfg: dict,
    stage: int,
    epoch: int,
    reward_index: int = 0,
    optimizer: Optional[AdamW] = None,
    controller: Optional[LdamController] = None,
) -> CheckpointData:
    tensors = {name: p.data.copy() for name, p in bundle.named_parameters().items()}
    if optimizer is not None:
        tensors.update({k: v.copy() for k, v in optimizer.state_arrays().items()})
    meta = {
        "seed": int(cfg["run.seed"]),
        "stage": stage,
        "epoch": epoch,
        "reward_index": reward_index,
    }
    masks = {}
    if controller is not None:
        st = controller.state
        meta["ldam"] = {
            "grad_prev": encode_float(st.grad_prev),
            "reward_prev": st.reward_prev,
            "cooldown": st.cooldown,
            "stagnation": st.stagnation,
            "spike": st.spike,
            "epoch": st.epoch,
            "event_count": st.event_count,
            "last_gamma": st.last_gamma,
            "last_layers": list(st.last_layers),
        }
        masks = {k: v.copy() for k, v in st.masks.items()}
    return CheckpointData(
        config_text=format_config(cfg), meta=meta, tensors=tensors, ldam_masks=masks
    )


def restore_ldam_state(data: CheckpointData) -> LdamState:
    raw = data.meta.get("ldam")
    state = LdamState()
    state.masks = {int(k): v.copy() for k, v in data.ldam_masks.items()}
    if raw:
        state.grad_prev = decode_float(raw["grad_prev"])
        state.reward_prev = float(raw["reward_prev"])
        state.cooldown = int(raw["cooldown"])
        state.stagnation = int(raw["stagnation"])
        state.spike = bool(raw["spike"])
        state.epoch = int(raw["epoch"])
        state.event_count = int(raw["event_count"])
        state.last_gamma = float(raw["last_gamma"])
        state.last_layers = tuple(raw["last_layers"])
    return state


def install_parameters(bundle: ModelBundle, data: CheckpointData) -> dict[str, np.ndarray]:
    """Copy checkpoint tensors into the bundle; return leftover (optimizer) arrays."""
    params = bundle.named_parameters()
    leftover = {}
    for name, arr in data.tensors.items():
        if name in params:
            if params[name].shape != arr.shape:
                raise ConfigError(
                    f"checkpoint tensor {name} has shape {arr.shape}, "
                    f"model expects {params[name].shape}"
                )
            params[name].data = arr.copy()
        else:
            leftover[name] = arr
    missing = [n for n in params if n not in data.tensors]
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {missing[:5]}")
    return leftover


# -- evaluation ----------------------------------------------------------------

def evaluate_fm_loss(
    bundle: ModelBundle,
    dataset: SyntheticDataset,
    seed: int,
    condition_fn=None,
) -> float:
    """Deterministic held-out velocity loss over the whole dataset."""
    total = 0.0
    for pid in range(dataset.n_prompts):
        rng = spawn_rng(seed, "eval", pid)
        with T.no_grad():
            cond = (
                condition_fn(pid) if condition_fn is not None else bundle.condition(pid)
            )
            loss = fm_loss(
                bundle.denoiser, dataset.targets[pid], Tensor(cond.data), rng,
                bundle.schedule,
            )
        total += loss.item()
    return total / dataset.n_prompts


# -- stage loops -----------------------------------------------------------------

def _train_fm_epochs(
    bundle: ModelBundle,
    dataset: SyntheticDataset,
    cfg: dict,
    stage: int,
    optimizer: AdamW,
    metrics: MetricsLog,
    start_epoch: int,
    epochs: int,
    stop_after: Optional[int] = None,
) -> int:
    seed = int(cfg["run.seed"])
    batch = int(cfg["train.batch"])
    base_lr = optimizer.lr
    cosine = bool(cfg["train.cosine_lr"])
    # the lr schedule spans the configured epochs, so an interrupted run
    # resumed later retraces the exact same decay
    last = min(epochs, stop_after) if stop_after is not None else epochs
    trainable = [bundle.named_parameters()[n] for n in bundle.trainable_names(stage)]
    for epoch in range(start_epoch + 1, last + 1):
        if cosine:
            optimizer.lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / max(epochs, 1)))
        rng = spawn_rng(seed, "stage", stage, "epoch", epoch)
        total = None
        for pid in range(dataset.n_prompts):
            cond = bundle.condition(pid)
            take = min(batch, dataset.per_prompt)
            idx = rng.choice(dataset.per_prompt, size=take, replace=False)
            item = fm_loss(bundle.denoiser, dataset.targets[pid][idx], cond, rng, bundle.schedule)
            total = item if total is None else T.add(total, item)
        loss = T.scale(total, 1.0 / dataset.n_prompts)
        T.backward(loss)
        bundle.assert_freezing(stage)
        g_norm = grad_norm(trainable)
        optimizer.step()
        optimizer.zero_grad()
        metrics.append(
            {
                "epoch": epoch,
                "stage": stage,
                "loss": loss.item(),
                "grad_norm": g_norm,
                "ldam": None,
            }
        )
    return last


def _train_rl_epochs(
    bundle: ModelBundle,
    dataset: SyntheticDataset,
    cfg: dict,
    metrics: MetricsLog,
    out_dir: Path,
    start_reward: int,
    start_epoch: int,
    initial_state: Optional[LdamState],
    stop_after: Optional[int] = None,
) -> tuple[int, int, LdamController]:
    seed = int(cfg["run.seed"])
    epochs = int(cfg["stage3.epochs"])
    names = reward_sequence(cfg)
    gcfg = grpo_config(cfg)
    lcfg = ldam_config(cfg, bundle)
    use_ldam = bool(cfg["stage3.ldam"])
    trainable = [bundle.named_parameters()[n] for n in bundle.trainable_names(3)]
    controller = LdamController(lcfg, derive_seed(seed, "ldam", start_reward), state=initial_state)
    reached_reward, reached_epoch = start_reward, start_epoch
    for r_idx in range(start_reward, len(names)):
        kind = RewardKind(names[r_idx])
        scorer = get_scorer(kind)
        if r_idx != start_reward:
            # next reward: fresh counters, but installed masks carry over
            controller = LdamController(
                lcfg, derive_seed(seed, "ldam", r_idx),
                state=LdamState(masks=dict(controller.state.masks)),
            )
        first = start_epoch if r_idx == start_reward else 0
        last = min(epochs, stop_after) if stop_after is not None else epochs
        for epoch in range(first + 1, last + 1):
            masks = controller.apply_masks() if use_ldam else LayerMaskSet.identity()
            epoch_rewards = []
            epoch_gnorms = []
            for pid in range(dataset.n_prompts):
                with T.no_grad():
                    frozen_cond = Tensor(bundle.condition(pid, masks).data)
                group = rollout_group(
                    bundle.denoiser, frozen_cond, pid, scorer, gcfg,
                    derive_seed(seed, "rollout", r_idx, epoch, pid),
                    bundle.denoiser.config.sample_dim, bundle.schedule,
                )
                for _ in range(max(1, gcfg.inner_epochs)):
                    cond = bundle.condition(pid, masks)
                    fn = make_step_mean_fn(bundle.denoiser, cond, gcfg, bundle.schedule)
                    report = policy_update(fn, trainable, group, gcfg)
                    bundle.assert_freezing(3)
                epoch_rewards.append(report.reward_mean)
                epoch_gnorms.append(report.grad_norm)
            reward_mean = float(np.mean(epoch_rewards))
            gnorm_mean = float(np.mean(epoch_gnorms))
            decision = (
                controller.observe(gnorm_mean, reward_mean, kind) if use_ldam else None
            )
            metrics.append(
                {
                    "epoch": epoch,
                    "stage": 3,
                    "reward_kind": kind.value,
                    "reward_index": r_idx,
                    "reward": reward_mean,
                    "grad_norm": gnorm_mean,
                    "ldam": {
                        "decision": "perturb" if decision else "none",
                        "gamma": decision.gamma if decision else 0.0,
                        "layers": list(decision.layers) if decision else [],
                    },
                }
            )
        if use_ldam:
            log_path = out_dir / f"ldam_{kind.value}.csv"
            log_path.write_text("\n".join(controller.event_log_lines()) + "\n", encoding="utf-8")
        reached_reward, reached_epoch = r_idx, last
        if stop_after is not None and last < epochs:
            break
    return reached_reward, reached_epoch, controller


def run_stage(
    cfg: dict,
    stage: int,
    out_dir,
    resume: Optional[str] = None,
    data_dir: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> Path:
    """Run one training stage; returns the path of the final checkpoint.

    `stop_after` interrupts the stage after that many epochs (per reward in
    stage 3) while keeping the full-length schedules, so the saved
    checkpoint resumes onto the exact trajectory of an uninterrupted run.
    """
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    if stage in (2, 3) and resume is None:
        raise ConfigError(f"stage {stage} requires --resume with the previous checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_stage_dataset(cfg, stage, data_dir)
    bundle = build_bundle(cfg, dataset.prompts)

    start_epoch = 0
    start_reward = 0
    ldam_state: Optional[LdamState] = None
    optimizer_state: dict[str, np.ndarray] = {}
    if resume is not None:
        data = load_checkpoint(resume)
        optimizer_state = install_parameters(bundle, data)
        ldam_state = restore_ldam_state(data)
        if int(data.meta["stage"]) == stage:
            start_epoch = int(data.meta["epoch"])
            start_reward = int(data.meta.get("reward_index", 0))
        # a checkpoint from an earlier stage starts this stage from scratch,
        # keeping only parameters and any installed masks

    bundle.set_stage(stage)
    (out / "config.resolved.cfg").write_text(format_config(cfg), encoding="utf-8")
    metrics = MetricsLog(out / "metrics.jsonl")

    controller = None
    optimizer = None
    if stage in (1, 2):
        epochs = int(cfg[f"stage{stage}.epochs"])
        trainable = {n: bundle.named_parameters()[n] for n in bundle.trainable_names(stage)}
        optimizer = AdamW(
            trainable,
            lr=stage_lr(cfg, stage),
            weight_decay=float(cfg["train.weight_decay"]),
        )
        if optimizer_state and resume is not None and start_epoch > 0:
            optimizer.load_state_arrays(optimizer_state)
        final_epoch = _train_fm_epochs(
            bundle, dataset, cfg, stage, optimizer, metrics, start_epoch, epochs,
            stop_after=stop_after,
        )
        reward_index = 0
    else:
        reward_index, final_epoch, controller = _train_rl_epochs(
            bundle, dataset, cfg, metrics, out, start_reward, start_epoch, ldam_state,
            stop_after=stop_after,
        )

    ckpt_path = out / "checkpoint.ckpt"
    save_checkpoint(
        ckpt_path,
        bundle_checkpoint(
            bundle, cfg, stage, final_epoch, reward_index,
            optimizer=optimizer, controller=controller,
        ),
    )
    return ckpt_path


def bundle_from_checkpoint(
    cfg: dict, checkpoint_path, data_dir: Optional[str] = None
) -> tuple[ModelBundle, CheckpointData]:
    """Rebuild a bundle (with installed masks available) from a checkpoint."""
    data = load_checkpoint(checkpoint_path)
    dataset = load_stage_dataset(cfg, 1, data_dir)
    bundle = build_bundle(cfg, dataset.prompts)
    install_parameters(bundle, data)
    for name, p in bundle.named_parameters().items():
        p.requires_grad = False
        p.grad = None
    return bundle, data
