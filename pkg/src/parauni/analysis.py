"""Layer analyses: per-layer conditioning sweeps, similarity matrices,
region-ablation reward sensitivity, and their CSV schemas."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .diffusion import Schedule, linear_schedule, sample_ode
from .errors import EmptinessError, LayerIndexError
from .lim import Lim, encode_layer, integrate, integrate_single, integrate_subset
from .rewards import Scorer
from .seeding import derive_seed
from .tensor import Tensor
from .vlm import LayerFeatures


@dataclass
class SweepReport:
    scores: list[float]
    prompt_count: int

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [L, L]
    zero_norm_layers: list[int] = field(default_factory=list)


@dataclass
class AblationRow:
    region: str
    reward: str
    baseline: float
    ablated: float

    @property
    def delta(self) -> float:
        return self.ablated - self.baseline


@dataclass
class AblationReport:
    rows: list[AblationRow]
    baselines: dict[str, float]


def single_layer_sweep(
    bundle,
    prompts: Sequence[int],
    scorer: Scorer,
    samples_per_prompt: int,
    seed: int,
    steps: int = 20,
    schedule: Optional[Schedule] = None,
) -> SweepReport:
    """Generate with each single layer as the condition; average the scores."""
    if len(prompts) == 0:
        raise EmptinessError("sweep needs at least one prompt")
    schedule = schedule or linear_schedule()
    layer_count = bundle.vlm.config.layers
    dim = bundle.denoiser.config.sample_dim
    scores = []
    for layer in range(1, layer_count + 1):
        acc = 0.0
        for prompt_id in prompts:
            with T.no_grad():
                feats = bundle.vlm.forward_collect(bundle.prompt_tokens(prompt_id))
                cond = integrate_single(bundle.lim, feats, layer)
            cond = Tensor(cond.data)
            for s in range(samples_per_prompt):
                sample = sample_ode(
                    bundle.denoiser, cond, steps,
                    derive_seed(seed, "sweep", layer, prompt_id, s), dim, schedule,
                )
                acc += float(scorer(sample, prompt_id))
        scores.append(acc / (len(prompts) * samples_per_prompt))
    return SweepReport(scores=scores, prompt_count=len(prompts))


def encode_all_layers(lim: Lim, features: LayerFeatures) -> list[np.ndarray]:
    """Post-encoder per-layer features, as plain arrays."""
    with T.no_grad():
        return [
            encode_layer(lim, feats, i).data
            for i, feats in enumerate(features.per_layer, start=1)
        ]


def similarity_matrix(
    encoded: Sequence[np.ndarray], per_query: bool = False
) -> SimilarityMatrix:
    """Cosine similarity between per-layer encodings.

    Default pools each layer over the query axis first; `per_query` instead
    takes the cosine per query row and averages the rows afterwards.
    """
    if len(encoded) == 0:
        raise EmptinessError("similarity needs at least one layer")
    layers = [np.asarray(e, dtype=np.float64) for e in encoded]
    n = len(layers)
    out = np.zeros((n, n), dtype=np.float64)
    flagged: list[int] = []
    if per_query:
        norms = [np.linalg.norm(layer, axis=1) for layer in layers]
        flagged = [i + 1 for i, nm in enumerate(norms) if np.any(nm == 0.0)]
        for i in range(n):
            for j in range(i, n):
                dots = np.sum(layers[i] * layers[j], axis=1)
                denom = norms[i] * norms[j]
                rows = np.where(denom > 0.0, dots / np.where(denom > 0, denom, 1.0), 0.0)
                out[i, j] = out[j, i] = float(np.clip(rows, -1.0, 1.0).mean())
        return SimilarityMatrix(values=out, zero_norm_layers=flagged)
    pooled = [layer.mean(axis=0) for layer in layers]
    norms = [float(np.linalg.norm(p)) for p in pooled]
    flagged = [i + 1 for i, nm in enumerate(norms) if nm == 0.0]
    for i in range(n):
        for j in range(i, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                value = 0.0
            else:
                value = float(np.dot(pooled[i], pooled[j]) / (norms[i] * norms[j]))
                value = max(-1.0, min(1.0, value))
            out[i, j] = out[j, i] = value
    return SimilarityMatrix(values=out, zero_norm_layers=flagged)


def region_ablation(
    bundle,
    regions: dict[str, Iterable[int]],
    kinds: Sequence,
    prompts: Sequence[int],
    seed: int,
    samples_per_prompt: int = 2,
    steps: int = 20,
    schedule: Optional[Schedule] = None,
) -> AblationReport:
    """Score the full condition, then each region's complement, per reward."""
    from .rewards import get_scorer

    if len(prompts) == 0:
        raise EmptinessError("ablation needs at least one prompt")
    schedule = schedule or linear_schedule()
    layer_count = bundle.vlm.config.layers
    all_layers = set(range(1, layer_count + 1))
    for name, region in regions.items():
        region_set = set(int(i) for i in region)
        if not region_set:
            raise EmptinessError(f"region {name!r} is empty")
        bad = region_set - all_layers
        if bad:
            raise LayerIndexError(f"region {name!r} has out-of-range layers {sorted(bad)}")
        if region_set == all_layers:
            raise EmptinessError(f"region {name!r} covers all layers; complement is empty")

    def mean_scores(keep: Optional[set[int]]) -> dict[str, float]:
        per_kind = {str(getattr(k, "value", k)): 0.0 for k in kinds}
        dim = bundle.denoiser.config.sample_dim
        for prompt_id in prompts:
            with T.no_grad():
                feats = bundle.vlm.forward_collect(bundle.prompt_tokens(prompt_id))
                if keep is None:
                    cond = integrate(bundle.lim, feats)
                else:
                    cond = integrate_subset(bundle.lim, feats, keep)
            cond = Tensor(cond.data)
            for s in range(samples_per_prompt):
                sample = sample_ode(
                    bundle.denoiser, cond, steps,
                    derive_seed(seed, "ablation", prompt_id, s), dim, schedule,
                )
                for kind in kinds:
                    key = str(getattr(kind, "value", kind))
                    per_kind[key] += float(get_scorer(kind)(sample, prompt_id))
        total = len(prompts) * samples_per_prompt
        return {k: v / total for k, v in per_kind.items()}

    baselines = mean_scores(None)
    rows = []
    for name, region in regions.items():
        keep = all_layers - set(int(i) for i in region)
        ablated = mean_scores(keep)
        for kind in kinds:
            key = str(getattr(kind, "value", kind))
            rows.append(
                AblationRow(
                    region=name, reward=key,
                    baseline=baselines[key], ablated=ablated[key],
                )
            )
    return AblationReport(rows=rows, baselines=baselines)


def default_regions(layer_count: int) -> dict[str, list[int]]:
    """Shallow / middle / deep bands scaled from the 28-layer reference."""
    from .ldam import select_layers
    from .rewards import RewardKind

    middle = select_layers(RewardKind.QUALITY, layer_count)
    deep = select_layers(RewardKind.ALIGNMENT, layer_count)
    deep = [i for i in deep if i not in middle]
    shallow = [i for i in range(1, layer_count + 1) if i not in middle and i not in deep]
    regions = {}
    if shallow:
        regions["shallow"] = shallow
    if middle:
        regions["middle"] = middle
    if deep:
        regions["deep"] = deep
    return regions


# -- CSV emission -----------------------------------------------------------

def write_sweep_csv(report: SweepReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "score"])
        for layer, score in enumerate(report.scores, start=1):
            writer.writerow([layer, f"{score:.8g}"])


def write_similarity_csv(matrix: SimilarityMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "value"])
        n = matrix.values.shape[0]
        for i in range(n):
            for j in range(n):
                writer.writerow([i + 1, j + 1, f"{matrix.values[i, j]:.8g}"])


def write_ablation_csv(report: AblationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "reward", "baseline", "ablated", "delta"])
        for row in report.rows:
            writer.writerow(
                [row.region, row.reward, f"{row.baseline:.8g}",
                 f"{row.ablated:.8g}", f"{row.delta:.8g}"]
            )
