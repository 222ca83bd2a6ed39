"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.
"""
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from parauni import tensor as T
from parauni.checkpoint import load_checkpoint, save_checkpoint
from parauni.config import format_config, resolve_config
from parauni.data import generate_dataset
from parauni.diffusion import (
    Denoiser,
    DenoiserConfig,
    Transition,
    fm_loss,
    ode_trajectory,
    sample_ode,
    sample_sde,
    transition_logprob,
)
from parauni.grpo import (
    GrpoConfig,
    RolloutGroup,
    advantages,
    make_step_mean_fn,
    policy_update,
    rollout_group,
)
from parauni.ldam import LdamConfig, LdamController, Perturb
from parauni.nn import AdamW, Linear, Module
from parauni.pipeline import (
    build_bundle,
    evaluate_fm_loss,
    gen_data,
    read_metrics,
    run_stage,
)
from parauni.rewards import RewardKind, alignment_reward
from parauni.seeding import derive_seed, spawn_rng
from parauni.tensor import Tensor, backward, finite_difference

ROOT = Path(__file__).resolve().parents[1]


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line, file=sys.stderr)
    assert passed, line


# -- criterion 1: gradient correctness ---------------------------------------

def _grad_vs_fd(build, params, h=1e-3):
    for p in params:
        p.requires_grad = True
        p.grad = None
    backward(build())
    fd = finite_difference(lambda: build().item(), params, h=h)
    analytic = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params
    ])
    reference = np.concatenate([r.ravel() for r in fd])
    return float(np.linalg.norm(analytic - reference) / max(np.linalg.norm(reference), 1e-8))


def test_criterion_1_gradient_correctness():
    start = time.time()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((3, 4)) * 0.8)
        b = Tensor(rng.standard_normal((3, 4)) * 0.8)
        m1 = Tensor(rng.standard_normal((3, 4)) * 0.5)
        m2 = Tensor(rng.standard_normal((4, 2)) * 0.5)
        g = Tensor(rng.standard_normal(4) * 0.5 + 1.0)
        bb = Tensor(rng.standard_normal(4) * 0.2)
        w = Tensor(rng.standard_normal((3, 4)))
        q = Tensor(rng.standard_normal((2, 3)) * 0.5)
        kk = Tensor(rng.standard_normal((4, 3)) * 0.5)
        v = Tensor(rng.standard_normal((4, 3)) * 0.5)
        wa = Tensor(rng.standard_normal((2, 3)))
        checks = [
            (lambda: T.add(a, b).sum(), [a, b]),
            (lambda: T.sub(a, b).sum(), [a, b]),
            (lambda: T.mul(a, b).sum(), [a, b]),
            (lambda: T.matmul(m1, m2).sum(), [m1, m2]),
            (lambda: T.mul(T.softmax(a, axis=-1), w).sum(), [a]),
            (lambda: T.gelu(a).sum(), [a]),
            (lambda: T.mean(a).sum(), [a]),
            (lambda: T.mul(T.layernorm(a, g, bb), w).sum(), [a, g, bb]),
            (lambda: T.mul(T.concat([a, b], axis=1), T.concat([a, b], axis=1)).mean(), [a, b]),
            (lambda: T.mul(T.attention(q, kk, v), wa).sum(), [q, kk, v]),
            (lambda: T.exp(a).mean(), [a]),
        ]
        for build, params in checks:
            worst = max(worst, _grad_vs_fd(build, params))

        # end-to-end fm_loss gradient through the full denoiser
        model = Denoiser(
            DenoiserConfig(sample_dim=4, tokens=2, width=4, heads=2, cond_width=4, blocks=1),
            seed=seed,
        )
        cond = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
        batch = rng.standard_normal((1, 4)).astype(np.float32)

        def loss_builder():
            return fm_loss(model, batch, cond, np.random.default_rng(1234 + seed))

        tensors = list(model.named_parameters().values())
        worst = max(worst, _grad_vs_fd(loss_builder, tensors))
    elapsed = time.time() - start
    report(
        1,
        worst < 1e-3 and elapsed < 60,
        f"worst relative gradient error {worst:.2e} (< 1e-3) over 10 seeds in {elapsed:.1f}s (< 60s)",
    )


# -- criterion 2: flow-matching sanity ----------------------------------------

class TinyVelocity(Module):
    def __init__(self, hidden, seed):
        rng = spawn_rng("toy-velocity", seed)
        self.fc1 = Linear(2, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, 1, rng)

    def batch(self, x: np.ndarray, t: np.ndarray) -> Tensor:
        feats = Tensor(np.stack([x, t], axis=1).astype(np.float32))
        h = T.gelu(self.fc1(feats))
        h = T.gelu(self.fc2(h))
        return self.fc3(h)

    def __call__(self, x, cond, t):
        out = self.batch(np.atleast_1d(np.asarray(x, dtype=np.float32)),
                         np.full(np.atleast_1d(x).shape[0], t, dtype=np.float32))
        return T.reshape(out, (np.atleast_1d(x).shape[0],))


def test_criterion_2_flow_matching_reaches_bayes_floor():
    start = time.time()
    # analytic optimum for N(0,1) endpoints: integral of 1/((1-t)^2 + t^2)
    ts = np.linspace(0.0, 1.0, 20001)
    bayes = float(np.trapezoid(1.0 / ((1 - ts) ** 2 + ts**2), ts))
    model = TinyVelocity(16, seed=0)
    opt = AdamW(model.named_parameters(), lr=5e-3, weight_decay=0.0)
    rng = np.random.default_rng(1)
    for _ in range(3000):
        x0 = rng.standard_normal(64).astype(np.float32)
        eps = rng.standard_normal(64).astype(np.float32)
        t = rng.uniform(size=64).astype(np.float32)
        xt = (1 - t) * x0 + t * eps
        pred = model.batch(xt, t)
        diff = T.sub(pred, Tensor((eps - x0)[:, None]))
        backward(T.mean(T.mul(diff, diff)))
        opt.step()
        opt.zero_grad()
    # evaluate through the library loss on a large fresh batch
    eval_rng = np.random.default_rng(2)
    cond = Tensor(np.zeros((1, 1), dtype=np.float32))
    with T.no_grad():
        chunks = [
            fm_loss(model, eval_rng.standard_normal((2000, 1)).astype(np.float32), cond, eval_rng).item()
            for _ in range(10)
        ]
    measured = float(np.mean(chunks))
    elapsed = time.time() - start
    report(
        2,
        measured <= 1.10 * bayes and elapsed < 120,
        f"trained loss {measured:.4f} vs analytic optimum {bayes:.4f} "
        f"(ratio {measured / bayes:.3f} <= 1.10) in {elapsed:.1f}s (< 2min)",
    )


# -- criterion 3: SDE/ODE consistency -----------------------------------------

def gaussian_velocity(mean=1.5, std=0.8):
    def v(x, cond, t):
        x = np.asarray(x, dtype=np.float32)
        if t == 0.0:
            return -x
        var_t = (1 - t) ** 2 * std * std + t * t
        return (((t - (1 - t) * std * std) * (x - (1 - t) * mean)) / var_t - mean).astype(np.float32)

    return v


def test_criterion_3_sde_ode_consistency():
    start = time.time()
    cond = Tensor(np.zeros((1, 1), dtype=np.float32))
    model = gaussian_velocity()

    bitwise = True
    for seed in (0, 7):
        ode_states = ode_trajectory(model, cond, 25, seed=seed, sample_dim=32)
        traj = sample_sde(model, cond, 25, 0.0, seed=seed, sample_dim=32)
        for a, b in zip(ode_states, traj.states):
            if a.tobytes() != b.tobytes():
                bitwise = False

    n = 10_000
    ode = sample_ode(model, cond, 100, seed=12, sample_dim=n)
    sde = sample_sde(model, cond, 100, 0.5, seed=13, sample_dim=n).terminal
    se_mean = math.sqrt(ode.var() / n + sde.var() / n)
    se_var = math.sqrt(2.0 / (n - 1)) * math.sqrt(float(ode.var()) ** 2 + float(sde.var()) ** 2)
    mean_gap = abs(float(sde.mean() - ode.mean()))
    var_gap = abs(float(sde.var() - ode.var()))
    elapsed = time.time() - start
    report(
        3,
        bitwise and mean_gap < 3 * se_mean and var_gap < 3 * se_var and elapsed < 120,
        f"zero-noise bitwise match; mean gap {mean_gap:.4f} < {3 * se_mean:.4f}, "
        f"var gap {var_gap:.4f} < {3 * se_var:.4f} at 10^4 samples in {elapsed:.1f}s",
    )


# -- criterion 4: LDAM state machine -------------------------------------------

def _vectorized_trace_sim(length: int, threshold: int):
    """All realizable (spike, decline) sequences; epoch 1 cannot spike."""
    n_traces = 2 * 4 ** (length - 1)
    idx = np.arange(n_traces, dtype=np.int32)
    rest = idx >> 1
    latch = np.zeros(n_traces, dtype=bool)
    streak = np.zeros(n_traces, dtype=np.int8)
    cooldown = np.zeros(n_traces, dtype=np.int8)
    first_fire = np.zeros(n_traces, dtype=np.int8)
    second_fire = np.zeros(n_traces, dtype=np.int8)
    fire_count = np.zeros(n_traces, dtype=np.int8)
    scratch = np.empty(n_traces, dtype=np.int32)
    for n in range(1, length + 1):
        if n == 1:
            decline = (idx & 1).astype(bool)
        else:
            np.right_shift(rest, 2 * (n - 2), out=scratch)
            np.bitwise_or(latch, (scratch & 1).astype(bool), out=latch)
            decline = ((scratch >> 1) & 1).astype(bool)
        streak += decline
        fire = latch & (streak >= threshold) & (cooldown == 0)
        np.subtract(cooldown, (cooldown > 0).astype(np.int8), out=cooldown)
        streak[fire] = 0
        latch[fire] = False
        cooldown[fire] = n
        first_fire[fire & (fire_count == 0)] = n
        second_fire[fire & (fire_count == 1)] = n
        fire_count += fire
    return first_fire, second_fire, fire_count


def _trace_bits(index: int, length: int):
    bits = []
    decline0 = bool(index & 1)
    rest = index >> 1
    bits.append((False, decline0))
    for n in range(2, length + 1):
        digit = (rest >> (2 * (n - 2))) & 3
        bits.append((bool(digit & 1), bool((digit >> 1) & 1)))
    return bits


def _compile_values(bits):
    g, r = 1.0, 0.0
    out = []
    for i, (spike, decline) in enumerate(bits):
        if i > 0 and spike:
            g *= 1e2
        r = r if decline else r + 1.0
        out.append((g, r))
    return out


def test_criterion_4_ldam_state_machine():
    start = time.time()
    length, threshold = 12, 5
    first_fire, second_fire, fire_count = _vectorized_trace_sim(length, threshold)

    # gate shape: a fire needs >= threshold declines, and epoch 1 cannot spike
    fired = first_fire > 0
    assert int(first_fire[fired].min()) == threshold
    # cooldown spacing: the second event waits out the first's full cooldown
    two = second_fire > 0
    spacing_ok = bool(np.all(second_fire[two] >= 2 * first_fire[two] + 1))
    assert int(fire_count.max()) <= 2

    # the real controller agrees with the vectorized run on sampled traces
    n_traces = 2 * 4 ** (length - 1)
    rng = np.random.default_rng(99)
    sample = np.unique(np.concatenate([
        rng.integers(0, n_traces, size=1500),
        np.flatnonzero(fire_count == 2)[:500],  # stress the two-event corner
        np.arange(64),
    ]))
    agree = True
    for index in sample:
        ctrl = LdamController(
            LdamConfig(layer_count=6, mask_shape=(2, 4), stagnation_threshold=threshold),
            seed=5,
        )
        fires = []
        for n, (g_val, r_val) in enumerate(_compile_values(_trace_bits(int(index), length)), 1):
            decision = ctrl.observe(g_val, r_val, RewardKind.QUALITY)
            if isinstance(decision, Perturb):
                fires.append(n)
                if not (ctrl.state.stagnation == 0 and not ctrl.state.spike
                        and ctrl.state.cooldown == n):
                    agree = False
        want = [e for e in (first_fire[index], second_fire[index]) if e > 0]
        if fires != [int(w) for w in want]:
            agree = False

    # the three scripted reference traces
    ctrl = LdamController(LdamConfig(layer_count=6, mask_shape=(2, 4)), seed=0)
    decided = [isinstance(ctrl.observe(g, r, RewardKind.QUALITY), Perturb)
               for g, r in [(1.0, 0.0)] * 5 + [(100.0, 0.0)]]
    scripted_once = decided == [False] * 5 + [True]

    ctrl = LdamController(LdamConfig(layer_count=6, mask_shape=(2, 4)), seed=0)
    improving = all(
        ctrl.observe(10.0 ** (2 * i), float(i), RewardKind.QUALITY) is None
        for i in range(1, 15)
    )

    ctrl = LdamController(LdamConfig(layer_count=6, mask_shape=(2, 4)), seed=1)
    trace = [(1.0, 2.0)] + [(1.0, 0.0)] * 8 + [(100.0, 0.0)]
    fires_at_10 = [isinstance(ctrl.observe(g, r, RewardKind.QUALITY), Perturb) for g, r in trace][-1]
    quiet = all(
        ctrl.observe(g, r, RewardKind.QUALITY) is None
        for g, r in _compile_values([(True, True)] * 10)
    )
    elapsed = time.time() - start
    report(
        4,
        spacing_ok and agree and scripted_once and improving and fires_at_10 and quiet
        and elapsed < 10,
        f"exhaustive {n_traces} length-{length} traces: gate/resets/cooldown hold, "
        f"controller matches on {len(sample)} replayed traces, in {elapsed:.1f}s (< 10s)",
    )


# -- criterion 5: GRPO mechanics ------------------------------------------------

def test_criterion_5_grpo_mechanics():
    start = time.time()
    rng = np.random.default_rng(3)
    stats_ok = True
    for _ in range(50):
        r = rng.standard_normal(rng.integers(2, 16))
        adv = advantages(r)
        if abs(adv.mean()) > 1e-6:
            stats_ok = False
        if r.std() > 1e-9 and abs(adv.std() - 1.0) > 1e-4:
            stats_ok = False

    # zero-advantage bit-equality no-op
    theta = Tensor(np.array([0.25, -0.5]), requires_grad=True)
    before = theta.data.tobytes()
    group = RolloutGroup(
        prompt_id=0,
        trajectories=[
            __import__("parauni.diffusion", fromlist=["DenoiseTrajectory"]).DenoiseTrajectory(
                states=[np.zeros(2, dtype=np.float32), np.zeros(2, dtype=np.float32)],
                transitions=[Transition(t=1.0, mean=np.zeros(2, dtype=np.float32), std=0.5)],
            )
            for _ in range(3)
        ],
        rewards=[0.4, 0.4, 0.4],
    )
    rep = policy_update(lambda x, t: theta, [theta], group,
                        GrpoConfig(group_size=3, steps=1, lr=0.1))
    noop_ok = (not rep.updated) and theta.data.tobytes() == before

    # 1-D Gaussian toy task with the alignment reward, 200 epochs, 5 seeds
    cfg = GrpoConfig(group_size=8, clip_eps=0.2, lr=0.05, noise_level=0.7, steps=6)
    wins = 0
    gains = []
    for seed in range(5):
        theta = Tensor(np.zeros(3), requires_grad=True)

        def model(x, cond, t):
            x_t = Tensor(np.asarray(x, dtype=np.float32))
            return T.add(
                T.add(T.narrow(theta, 0, 0, 1), T.mul(x_t, T.narrow(theta, 0, 1, 1))),
                T.scale(T.narrow(theta, 0, 2, 1), float(t)),
            )

        cond = Tensor(np.zeros((1, 1), dtype=np.float32))
        curve = []
        for epoch in range(200):
            group = rollout_group(
                model, cond, 3, alignment_reward, cfg,
                derive_seed(seed, "toy", epoch), 1,
            )
            fn = make_step_mean_fn(model, cond, cfg)
            rep = policy_update(fn, [theta], group, cfg)
            curve.append(rep.reward_mean)
        ma20 = float(np.mean(curve[:20]))
        ma200 = float(np.mean(curve[180:200]))
        gains.append(ma200 - ma20)
        wins += ma200 > ma20
    elapsed = time.time() - start
    report(
        5,
        stats_ok and noop_ok and wins >= 4 and elapsed < 600,
        f"advantage stats ok, zero-advantage bit-no-op ok, toy reward improved for "
        f"{wins}/5 seeds (gains {['%.2f' % g for g in gains]}) in {elapsed:.1f}s (< 10min)",
    )


# -- criterion 6: all-layers vs last-layer --------------------------------------

def _train_variant(seed: int, use_all_layers: bool) -> float:
    from parauni.lim import integrate, integrate_single

    cfg = resolve_config(None, overrides={"run.seed": seed})
    base = generate_dataset(4, 6, vocab=24, seed=seed * 101 + 1, noise=0.1)
    hq = generate_dataset(4, 6, vocab=24, seed=seed * 101 + 1, noise=0.02)
    bundle = build_bundle(cfg, base.prompts)

    def condition(pid):
        feats = bundle.vlm.forward_collect(bundle.prompt_tokens(pid))
        if use_all_layers:
            return integrate(bundle.lim, feats)
        return integrate_single(bundle.lim, feats, bundle.vlm.config.layers)

    for stage, ds, epochs in ((1, base, 25), (2, hq, 30)):
        bundle.set_stage(stage)
        params = {n: bundle.named_parameters()[n] for n in bundle.trainable_names(stage)}
        opt = AdamW(params, lr=0.01, weight_decay=0.05)
        for epoch in range(1, epochs + 1):
            opt.lr = 0.01 * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / epochs))
            rng = spawn_rng(seed, "variant", stage, epoch)
            total = None
            for pid in range(ds.n_prompts):
                cond = condition(pid)
                idx = rng.choice(ds.per_prompt, size=6, replace=False)
                item = fm_loss(bundle.denoiser, ds.targets[pid][idx], cond, rng)
                total = item if total is None else T.add(total, item)
            backward(T.scale(total, 1.0 / ds.n_prompts))
            bundle.assert_freezing(stage)
            opt.step()
            opt.zero_grad()
    return evaluate_fm_loss(bundle, hq, seed=777, condition_fn=condition)


def test_criterion_6_all_layers_vs_last_layer():
    start = time.time()
    all_losses = [_train_variant(seed, True) for seed in range(5)]
    last_losses = [_train_variant(seed, False) for seed in range(5)]
    mean_all, mean_last = float(np.mean(all_losses)), float(np.mean(last_losses))
    bound_ok = mean_all <= mean_last * 1.02
    direction = "all-layers lower (matches the multi-layer claim)" if mean_all <= mean_last \
        else "all-layers higher (direction soft-fails, bound still enforced)"
    elapsed = time.time() - start
    report(
        6,
        bound_ok and elapsed < 900,
        f"stage-II eval loss all-layers {mean_all:.4f} vs last-layer {mean_last:.4f} "
        f"(ratio {mean_all / mean_last:.4f} <= 1.02); {direction}; {elapsed:.0f}s (< 15min)",
    )


# -- criterion 7: analysis structural invariants ---------------------------------

def test_criterion_7_analysis_invariants():
    from parauni.analysis import (
        encode_all_layers,
        region_ablation,
        similarity_matrix,
        single_layer_sweep,
    )

    start = time.time()
    cfg = resolve_config(None, overrides={"vlm.layers": 4})
    ds = generate_dataset(3, 2, vocab=24, seed=5)
    bundle = build_bundle(cfg, ds.prompts)

    with T.no_grad():
        feats = bundle.vlm.forward_collect(bundle.prompt_tokens(0))
    sim = similarity_matrix(encode_all_layers(bundle.lim, feats)).values
    sym_ok = bool(np.all(np.abs(sim - sim.T) < 1e-6))
    diag_ok = bool(np.all(np.abs(np.diag(sim) - 1.0) < 1e-6))
    range_ok = bool(np.all(sim >= -1.0) and np.all(sim <= 1.0))

    sweep = single_layer_sweep(bundle, [0, 1], alignment_reward, 1, seed=6, steps=4)
    length_ok = len(sweep) == bundle.vlm.config.layers

    ablation = region_ablation(
        bundle, {"deep": [4], "mid": [2, 3]}, list(RewardKind), [0, 1], seed=7,
        samples_per_prompt=1, steps=4,
    )
    deltas_ok = all(row.delta == row.ablated - row.baseline for row in ablation.rows)

    # soft property, reported not asserted: adjacent-layer similarity
    n = sim.shape[0]
    adjacent = float(np.mean([sim[i, i + 1] for i in range(n - 1)]))
    off = sim[~np.eye(n, dtype=bool)]
    print(
        f"  [soft] adjacent-layer similarity {adjacent:.3f} vs mean off-diagonal "
        f"{float(off.mean()):.3f}",
        file=sys.stderr,
    )
    elapsed = time.time() - start
    report(
        7,
        sym_ok and diag_ok and range_ok and length_ok and deltas_ok and elapsed < 60,
        f"similarity symmetric/unit-diagonal/in-range, sweep length {len(sweep)}, "
        f"ablation deltas reconcile, in {elapsed:.1f}s (< 1min)",
    )


# -- criterion 8: checkpoint determinism -----------------------------------------

def test_criterion_8_checkpoint_determinism(tmp_path):
    start = time.time()
    overrides = {
        "train.batch": 4, "train.lr": 0.01, "stage1.epochs": 3, "stage2.epochs": 4,
        "data.prompts": 3, "data.per_prompt": 4,
    }
    cfg = resolve_config(None, overrides=overrides)
    gen_data(cfg, tmp_path / "data")
    ck1 = run_stage(cfg, 1, tmp_path / "s1", data_dir=tmp_path / "data")

    # bit-exact round trip
    data = load_checkpoint(ck1)
    save_checkpoint(tmp_path / "copy.ckpt", data)
    round_trip_ok = (tmp_path / "copy.ckpt").read_bytes() == Path(ck1).read_bytes()

    # interrupted + resumed stage 2 reproduces the continuous metrics exactly
    run_stage(cfg, 2, tmp_path / "cont", resume=ck1, data_dir=tmp_path / "data")
    continuous = {r["epoch"]: r for r in read_metrics(tmp_path / "cont" / "metrics.jsonl")}
    mid = run_stage(cfg, 2, tmp_path / "half", resume=ck1, data_dir=tmp_path / "data", stop_after=2)
    run_stage(cfg, 2, tmp_path / "split", resume=mid, data_dir=tmp_path / "data")
    resumed = read_metrics(tmp_path / "split" / "metrics.jsonl")
    resume_ok = bool(resumed) and all(
        r["loss"] == continuous[r["epoch"]]["loss"]
        and r["grad_norm"] == continuous[r["epoch"]]["grad_norm"]
        for r in resumed
    )
    elapsed = time.time() - start
    report(
        8,
        round_trip_ok and resume_ok and elapsed < 60,
        f"round-trip bit-exact, resumed epochs {[r['epoch'] for r in resumed]} metrics equal "
        f"continuous run, in {elapsed:.1f}s (< 1min)",
    )


# -- criterion 9: end-to-end smoke ------------------------------------------------

def test_criterion_9_end_to_end_smoke(tmp_path):
    start = time.time()
    cfg_path = ROOT / "configs" / "desk.cfg"
    env = {"PYTHONPATH": str(ROOT / "src")}
    import os

    env.update({k: v for k, v in os.environ.items() if k != "PARAUNI_SEED"})

    def cli(*args):
        return subprocess.run(
            [sys.executable, "-m", "parauni.cli", *args],
            cwd=tmp_path, env=env, capture_output=True, text=True,
        )

    steps = [
        ("gen-data", ["gen-data", "--config", str(cfg_path), "--out", "data"]),
        ("stage1", ["train", "--stage", "1", "--config", str(cfg_path),
                    "--out", "s1", "--data", "data"]),
        ("stage2", ["train", "--stage", "2", "--config", str(cfg_path),
                    "--out", "s2", "--data", "data", "--resume", "s1/checkpoint.ckpt"]),
        ("stage3", ["train", "--stage", "3", "--config", str(cfg_path),
                    "--out", "s3", "--data", "data", "--resume", "s2/checkpoint.ckpt"]),
        ("analyze-sweep", ["analyze", "sweep", "--checkpoint", "s3/checkpoint.ckpt",
                           "--out", "analysis", "--data", "data", "--samples", "1",
                           "--steps", "6"]),
        ("analyze-similarity", ["analyze", "similarity", "--checkpoint", "s3/checkpoint.ckpt",
                                "--out", "analysis", "--data", "data"]),
        ("analyze-ablation", ["analyze", "ablation", "--checkpoint", "s3/checkpoint.ckpt",
                              "--out", "analysis", "--data", "data", "--samples", "1",
                              "--steps", "6"]),
    ]
    for name, args in steps:
        proc = cli(*args)
        assert proc.returncode == 0, f"{name} exited {proc.returncode}: {proc.stderr[-2000:]}"

    records = read_metrics(tmp_path / "s3" / "metrics.jsonl")
    trend_lines = []
    trends_ok = True
    for kind in ("quality", "preference", "alignment"):
        rewards = [r["reward"] for r in records if r["reward_kind"] == kind]
        q = max(1, len(rewards) // 5)
        first, last = float(np.mean(rewards[:q])), float(np.mean(rewards[-q:]))
        trends_ok &= last >= first
        trend_lines.append(f"{kind} {first:.3f}->{last:.3f}")
    elapsed = time.time() - start
    report(
        9,
        trends_ok and elapsed < 600,
        f"pipeline exit 0; per-reward quintile means non-decreasing ({'; '.join(trend_lines)}) "
        f"in {elapsed:.0f}s (< 10min)",
    )
