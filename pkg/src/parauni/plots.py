"""Report rendering: matplotlib figures next to the CSV outputs, plus a
dependency-free SVG emitter for the `plot` subcommand."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError


# -- matplotlib figures -------------------------------------------------------

def render_sweep_png(scores, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    layers = np.arange(1, len(scores) + 1)
    ax.plot(layers, scores, marker="o")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean score")
    ax.set_title("single-layer conditioning sweep")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_similarity_png(matrix: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="viridis", origin="lower",
                   extent=(0.5, matrix.shape[1] + 0.5, 0.5, matrix.shape[0] + 0.5))
    ax.set_xlabel("layer j")
    ax.set_ylabel("layer i")
    ax.set_title("layer cosine similarity")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation_png(rows, path) -> None:
    """rows: iterable of (region, reward, delta)."""
    rows = list(rows)
    labels = [f"{region}\n{reward}" for region, reward, _ in rows]
    deltas = [delta for _, _, delta in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 4))
    colors = ["tab:red" if d < 0 else "tab:green" for d in deltas]
    ax.bar(range(len(rows)), deltas, color=colors)
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("score delta vs full condition")
    ax.set_title("region-ablation reward sensitivity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sample_png(sample: np.ndarray, grid: int, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.asarray(sample).reshape(grid, grid), cmap="magma")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics_png(records, path) -> None:
    """Loss or reward curves from a metrics log."""
    fig, ax = plt.subplots(figsize=(6, 4))
    losses = [(r["epoch"], r["loss"]) for r in records if "loss" in r and r["loss"] is not None]
    if losses:
        xs, ys = zip(*losses)
        ax.plot(xs, ys, label="fm loss")
        ax.set_ylabel("loss")
    by_kind: dict[str, list] = {}
    for r in records:
        if "reward" in r and r.get("reward_kind"):
            by_kind.setdefault(r["reward_kind"], []).append(r["reward"])
    for kind, values in by_kind.items():
        ax.plot(range(1, len(values) + 1), values, label=f"reward: {kind}")
        ax.set_ylabel("value")
    ax.set_xlabel("epoch")
    ax.grid(alpha=0.3)
    if losses or by_kind:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- standalone SVG emitter ----------------------------------------------------

_SVG_W, _SVG_H, _PAD = 640, 400, 48


def _svg_header() -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">\n'
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>\n'
    )


def svg_line_chart(points: list[tuple[float, float]], path) -> None:
    """One polyline through the given (x, y) points."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    coords = []
    for x, y in points:
        px = _PAD + (x - x_lo) / x_span * (_SVG_W - 2 * _PAD)
        py = _SVG_H - _PAD - (y - y_lo) / y_span * (_SVG_H - 2 * _PAD)
        coords.append(f"{px:.2f},{py:.2f}")
    body = (
        f'<polyline fill="none" stroke="#1f6fb2" stroke-width="2" '
        f'points="{" ".join(coords)}"/>\n'
    )
    axis = (
        f'<line x1="{_PAD}" y1="{_SVG_H - _PAD}" x2="{_SVG_W - _PAD}" '
        f'y2="{_SVG_H - _PAD}" stroke="black"/>\n'
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_SVG_H - _PAD}" stroke="black"/>\n'
    )
    Path(path).write_text(_svg_header() + axis + body + "</svg>\n", encoding="utf-8")


def svg_heatmap(matrix: np.ndarray, path) -> None:
    n, m = matrix.shape
    cell_w = (_SVG_W - 2 * _PAD) / m
    cell_h = (_SVG_H - 2 * _PAD) / n
    cells = []
    for i in range(n):
        for j in range(m):
            v = (float(matrix[i, j]) + 1.0) / 2.0  # [-1, 1] -> [0, 1]
            r = int(255 * v)
            b = int(255 * (1.0 - v))
            x = _PAD + j * cell_w
            y = _SVG_H - _PAD - (i + 1) * cell_h
            cells.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell_w:.2f}" '
                f'height="{cell_h:.2f}" fill="rgb({r},64,{b})"/>'
            )
    Path(path).write_text(_svg_header() + "\n".join(cells) + "\n</svg>\n", encoding="utf-8")


def svg_bars(labels: list[str], values: list[float], path) -> None:
    span = max(abs(v) for v in values) or 1.0
    n = len(values)
    slot = (_SVG_W - 2 * _PAD) / n
    mid = _SVG_H / 2
    parts = [
        f'<line x1="{_PAD}" y1="{mid}" x2="{_SVG_W - _PAD}" y2="{mid}" stroke="black"/>'
    ]
    for i, (label, v) in enumerate(zip(labels, values)):
        h = abs(v) / span * (_SVG_H / 2 - _PAD)
        x = _PAD + i * slot + slot * 0.15
        y = mid - h if v >= 0 else mid
        color = "#2a9d4e" if v >= 0 else "#c23b3b"
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{slot * 0.7:.2f}" '
            f'height="{h:.2f}" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{_SVG_H - 12}" font-size="10">{label}</text>'
        )
    Path(path).write_text(_svg_header() + "\n".join(parts) + "\n</svg>\n", encoding="utf-8")


def plot_csv(in_path, out_path) -> str:
    """Dispatch on the CSV header; returns the chart kind that was drawn."""
    with open(in_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [row for row in reader if row]
    if header is None:
        raise ConfigError(f"{in_path}: empty CSV")
    header = [h.strip() for h in header]
    if header == ["layer", "score"]:
        points = [(float(r[0]), float(r[1])) for r in rows]
        svg_line_chart(points, out_path)
        return "line"
    if header == ["i", "j", "value"]:
        n = max(int(r[0]) for r in rows)
        m = max(int(r[1]) for r in rows)
        matrix = np.zeros((n, m))
        for r in rows:
            matrix[int(r[0]) - 1, int(r[1]) - 1] = float(r[2])
        svg_heatmap(matrix, out_path)
        return "heatmap"
    if header == ["region", "reward", "baseline", "ablated", "delta"]:
        labels = [f"{r[0]}:{r[1]}" for r in rows]
        values = [float(r[4]) for r in rows]
        svg_bars(labels, values, out_path)
        return "bars"
    raise ConfigError(f"{in_path}: unrecognized CSV schema {header}")
