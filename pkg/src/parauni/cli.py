"""Command-line interface.

Subcommands: gen-data, train, sample, analyze, plot. Exit codes: 0 success,
2 configuration/usage error, 3 I/O error, 4 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import (
    default_regions,
    encode_all_layers,
    region_ablation,
    similarity_matrix,
    single_layer_sweep,
    write_ablation_csv,
    write_similarity_csv,
    write_sweep_csv,
)
from .config import resolve_config
from .errors import CheckpointFormatError, ConfigError, InvariantError
from .data import GRID
from .diffusion import sample_ode, sample_sde
from .lim import LayerMaskSet
from .pipeline import (
    bundle_from_checkpoint,
    gen_data,
    read_metrics,
    run_stage,
)
from .rewards import RewardKind, alignment_reward, get_scorer, quality_reward
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parauni",
        description="Layer-wise conditioned flow-matching generator with RL fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write the synthetic datasets")
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--out", default="data")

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None)
    p_train.add_argument("--out", default=None, help="run directory (default runs/stage<k>)")
    p_train.add_argument("--data", default=None, help="dataset root (default data.dir)")

    p_sample = sub.add_parser("sample", help="generate one sample from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--prompt", type=int, required=True)
    p_sample.add_argument("--mode", choices=("ode", "sde"), default="ode")
    p_sample.add_argument("--steps", type=int, default=20)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--noise", type=float, default=0.7, help="sde noise level")
    p_sample.add_argument("--out", default="sample.csv")
    p_sample.add_argument("--data", default=None)

    p_an = sub.add_parser("analyze", help="run a layer analysis")
    p_an.add_argument("kind", choices=("sweep", "similarity", "ablation"))
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--out", required=True)
    p_an.add_argument("--data", default=None)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--samples", type=int, default=2, help="samples per prompt")
    p_an.add_argument("--steps", type=int, default=10, help="sampler steps")

    p_plot = sub.add_parser("plot", help="render a report CSV as a standalone SVG")
    p_plot.add_argument("--in", dest="in_path", required=True)
    p_plot.add_argument("--out", dest="out_path", required=True)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config)
    manifests = gen_data(cfg, args.out)
    print(f"wrote datasets under {args.out}:")
    for name, manifest in manifests.items():
        print(f"  {name}: {manifest['prompt_count']} prompts, checksum {manifest['checksum'][:12]}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    out_dir = Path(args.out) if args.out else Path("runs") / f"stage{args.stage}"
    ckpt = run_stage(cfg, args.stage, out_dir, resume=args.resume, data_dir=args.data)
    from .plots import render_metrics_png

    records = read_metrics(out_dir / "metrics.jsonl")
    render_metrics_png(records, out_dir / "metrics.png")
    print(f"stage {args.stage} finished; checkpoint at {ckpt}")
    return EXIT_OK


def _load_bundle(args):
    from .checkpoint import load_checkpoint

    data = load_checkpoint(args.checkpoint)
    # resolve from the checkpoint's embedded config so the shapes line up
    tmp = Path(args.checkpoint).with_suffix(".cfg.echo")
    tmp.write_text(data.config_text, encoding="utf-8")
    try:
        cfg = resolve_config(tmp)
    finally:
        tmp.unlink(missing_ok=True)
    bundle, ckpt = bundle_from_checkpoint(cfg, args.checkpoint, data_dir=args.data)
    return cfg, bundle, ckpt


def _cmd_sample(args) -> int:
    cfg, bundle, ckpt = _load_bundle(args)
    if not 0 <= args.prompt < len(bundle.prompts):
        raise ConfigError(f"prompt id {args.prompt} outside 0..{len(bundle.prompts) - 1}")
    masks = LayerMaskSet({int(k): v for k, v in ckpt.ldam_masks.items()})
    with T.no_grad():
        cond = Tensor(bundle.condition(args.prompt, masks).data)
    dim = bundle.denoiser.config.sample_dim
    if args.mode == "ode":
        sample = sample_ode(bundle.denoiser, cond, args.steps, args.seed, dim)
    else:
        sample = sample_sde(
            bundle.denoiser, cond, args.steps, args.noise, args.seed, dim
        ).terminal
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, sample[None, :], delimiter=",", fmt="%.8g")
    from .plots import render_sample_png

    render_sample_png(sample, GRID, out.with_suffix(".png"))
    scores = {
        "alignment": alignment_reward(sample, args.prompt),
        "quality": quality_reward(sample),
    }
    print(f"sample written to {out} (figure {out.with_suffix('.png')})")
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg, bundle, ckpt = _load_bundle(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompts = list(range(len(bundle.prompts)))
    from .plots import render_ablation_png, render_similarity_png, render_sweep_png

    if args.kind == "sweep":
        report = single_layer_sweep(
            bundle, prompts, get_scorer(str(cfg["reward.kind"])),
            args.samples, args.seed, steps=args.steps,
        )
        write_sweep_csv(report, out_dir / "sweep.csv")
        render_sweep_png(report.scores, out_dir / "sweep.png")
        print(f"sweep written to {out_dir / 'sweep.csv'}")
    elif args.kind == "similarity":
        with T.no_grad():
            feats = bundle.vlm.forward_collect(bundle.prompt_tokens(prompts[0]))
        matrix = similarity_matrix(encode_all_layers(bundle.lim, feats))
        write_similarity_csv(matrix, out_dir / "similarity.csv")
        render_similarity_png(matrix.values, out_dir / "similarity.png")
        if matrix.zero_norm_layers:
            print(f"warning: zero-norm pooled layers {matrix.zero_norm_layers}")
        print(f"similarity written to {out_dir / 'similarity.csv'}")
    else:
        regions = default_regions(bundle.vlm.config.layers)
        report = region_ablation(
            bundle, regions, list(RewardKind), prompts, args.seed,
            samples_per_prompt=args.samples, steps=args.steps,
        )
        write_ablation_csv(report, out_dir / "ablation.csv")
        render_ablation_png(
            [(r.region, r.reward, r.delta) for r in report.rows],
            out_dir / "ablation.png",
        )
        print(f"ablation written to {out_dir / 'ablation.csv'}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plots import plot_csv

    kind = plot_csv(args.in_path, args.out_path)
    print(f"rendered {kind} chart to {args.out_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "sample": _cmd_sample,
        "analyze": _cmd_analyze,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
