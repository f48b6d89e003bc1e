"""Figures.

The patch heatmap and the top-layer scatter are written as hand-built SVG, so
identical inputs give identical bytes. The remaining report figures (gap
distributions, patch magnitude vs gap, steering curves) go through matplotlib.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .patching import ConditionSummary, HeatmapResult

# viridis sampled at 9 evenly spaced stops
_VIRIDIS = (
    (0x44, 0x01, 0x54), (0x47, 0x2D, 0x7B), (0x3B, 0x52, 0x8B), (0x2C, 0x72, 0x8E), (0x21, 0x91, 0x8C),
    (0x28, 0xAE, 0x80), (0x5E, 0xC9, 0x62), (0xAD, 0xDC, 0x30), (0xFD, 0xE7, 0x25),
)
CONDITION_COLORS = {"good_news": "#1f77b4", "negative_control": "#d62728"}


def colormap(t: float) -> str:
    t = min(1.0, max(0.0, t)) * (len(_VIRIDIS) - 1)
    i = min(int(t), len(_VIRIDIS) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_VIRIDIS[i], _VIRIDIS[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def value_range(effects) -> tuple[float, float]:
    arr = np.asarray(effects, dtype=float)
    lo, hi = min(0.0, float(arr.min())), max(0.0, float(arr.max()))
    if lo == hi:
        hi = lo + 1.0
    return lo, hi


def cell_color(value: float, lo: float, hi: float) -> str:
    return colormap((value - lo) / (hi - lo))


def _n(x: float) -> str:
    return f"{x:.2f}"


def _header(width: float, height: float, manifest_hash: str) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_n(width)}" height="{_n(height)}" '
        f'viewBox="0 0 {_n(width)} {_n(height)}" font-family="sans-serif" font-size="10">'
    ]
    if manifest_hash:
        out.append(f"<!-- manifest_sha256={manifest_hash} -->")
    out.append(f'<rect x="0" y="0" width="{_n(width)}" height="{_n(height)}" fill="#ffffff"/>')
    return out


def _write(out: str | Path, parts: list[str]) -> Path:
    out = Path(out)
    out.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return out


def emit_heatmap_svg(heatmap: HeatmapResult, out: str | Path, manifest_hash: str = "", title: str = "") -> Path:
    """Layer x position heatmap; layer 0 is the bottom row."""
    n_layers, n_pos = heatmap.shape
    if n_layers == 0 or n_pos == 0:
        raise ValueError("heatmap is empty")
    lo, hi = value_range(heatmap.effects)
    cw, ch = 16.0, 14.0
    left, top, bottom, right = 56.0, 30.0, 90.0, 90.0
    width = left + n_pos * cw + right
    height = top + n_layers * ch + bottom
    parts = _header(width, height, manifest_hash)
    label = title or f"pair {heatmap.pair_id} {heatmap.condition}".strip()
    parts.append(f'<text x="{_n(left)}" y="18" font-size="12">{escape(label)}</text>')
    parts.append(f'<g id="cells" data-vmin="{lo!r}" data-vmax="{hi!r}">')
    for l, row in enumerate(heatmap.effects):
        y = top + (n_layers - 1 - l) * ch
        for p, v in enumerate(row):
            pad = bool(heatmap.pad_flags[p]) if heatmap.pad_flags else False
            parts.append(
                f'<rect x="{_n(left + p * cw)}" y="{_n(y)}" width="{_n(cw)}" height="{_n(ch)}" '
                f'fill="{cell_color(v, lo, hi)}" data-layer="{l}" data-pos="{p}" data-value="{v!r}"'
                + (' data-pad="true"' if pad else "")
                + "/>"
            )
    parts.append("</g>")
    for l in range(n_layers):
        y = top + (n_layers - 1 - l) * ch + ch * 0.75
        parts.append(f'<text x="{_n(left - 6)}" y="{_n(y)}" text-anchor="end">{l}</text>')
    parts.append(
        f'<text x="14" y="{_n(top + n_layers * ch / 2)}" transform="rotate(-90 14 {_n(top + n_layers * ch / 2)})" '
        f'text-anchor="middle">layer</text>'
    )
    base = top + n_layers * ch + 6
    for p, tok in enumerate(heatmap.token_labels):
        x = left + p * cw + cw / 2
        shown = tok.replace("\n", "\\n") if tok.strip() else repr(tok)[1:-1] or "␣"
        parts.append(
            f'<text x="{_n(x)}" y="{_n(base)}" transform="rotate(60 {_n(x)} {_n(base)})" font-size="8">'
            f"{escape(shown)}</text>"
        )
    # colorbar
    bx, steps = left + n_pos * cw + 20, 32
    bh = n_layers * ch
    for i in range(steps):
        t = (i + 0.5) / steps
        y = top + bh - (i + 1) * bh / steps
        parts.append(f'<rect x="{_n(bx)}" y="{_n(y)}" width="12" height="{_n(bh / steps + 0.5)}" fill="{colormap(t)}"/>')
    parts.append(f'<text x="{_n(bx + 16)}" y="{_n(top + 8)}" class="vmax">{hi:.4g}</text>')
    parts.append(f'<text x="{_n(bx + 16)}" y="{_n(top + bh)}" class="vmin">{lo:.4g}</text>')
    parts.append(f'<text x="{_n(bx)}" y="{_n(top + bh + 18)}" font-size="9">patch effect</text>')
    parts.append("</svg>")
    return _write(out, parts)


def _jitter(seed: int, pair_id: int, condition: str) -> tuple[float, float]:
    rng = np.random.default_rng([int(seed), int(pair_id), 0 if condition == "good_news" else 1])
    jx, jy = rng.uniform(-0.3, 0.3, size=2)
    return float(jx), float(jy)


def emit_layer_scatter(
    summaries: Sequence[ConditionSummary],
    out: str | Path,
    n_layers: int,
    seed: int = 0,
    manifest_hash: str = "",
    title: str = "Top causal patch layer per prompt",
) -> Path:
    """One mark per prompt at (pair id, top layer), coloured by condition.

    The jitter comes from (seed, pair_id, condition) and stays within
    +/-0.3 of a layer, so marks never cross into a neighbouring layer.
    """
    if not summaries:
        raise ValueError("need at least one condition summary")
    ids = [i for s in summaries for i in s.pair_ids]
    x_lo, x_hi = min(ids) - 1, max(ids) + 1
    pw, ph = max(300.0, 6.0 * (x_hi - x_lo)), 22.0 * max(n_layers, 2)
    left, top, bottom, right = 50.0, 30.0, 40.0, 150.0
    width, height = left + pw + right, top + ph + bottom

    def sx(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(layer):
        return top + ph - (layer + 0.5) / n_layers * ph

    parts = _header(width, height, manifest_hash)
    parts.append(f'<text x="{_n(left)}" y="18" font-size="12">{escape(title)}</text>')
    parts.append(f'<rect x="{_n(left)}" y="{_n(top)}" width="{_n(pw)}" height="{_n(ph)}" fill="none" stroke="#444444"/>')
    for l in range(n_layers):
        parts.append(f'<text x="{_n(left - 6)}" y="{_n(sy(l) + 3)}" text-anchor="end">{l}</text>')
    parts.append(f'<text x="{_n(left + pw / 2)}" y="{_n(height - 8)}" text-anchor="middle">prompt id</text>')
    parts.append('<g id="marks">')
    for s in summaries:
        color = CONDITION_COLORS.get(s.condition, "#555555")
        for pid, layer in zip(s.pair_ids, s.top_layers):
            jx, jy = _jitter(seed, pid, s.condition)
            parts.append(
                f'<circle cx="{_n(sx(pid + jx))}" cy="{_n(sy(layer + jy))}" r="3" fill="{color}" fill-opacity="0.8" '
                f'data-condition="{s.condition}" data-pair-id="{pid}" data-top-layer="{layer}"/>'
            )
    parts.append("</g>")
    for k, s in enumerate(summaries):
        y = top + 12 + 16 * k
        color = CONDITION_COLORS.get(s.condition, "#555555")
        parts.append(f'<circle cx="{_n(left + pw + 16)}" cy="{_n(y - 3)}" r="4" fill="{color}"/>')
        parts.append(
            f'<text x="{_n(left + pw + 24)}" y="{_n(y)}">{escape(s.condition)} (median {s.median_top_layer})</text>'
        )
    parts.append("</svg>")
    return _write(out, parts)


# ---------------------------------------------------------------------------
# matplotlib figures for the report


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False})
    return plt


def _save(fig, out: Path, metadata: dict | None = None) -> Path:
    fig.tight_layout()
    # no Software tag, so the bytes do not depend on the matplotlib version
    fig.savefig(out, dpi=120, metadata={"Software": None, **(metadata or {})})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return out


def plot_gap_distributions(gaps_by_condition: dict[str, Sequence[float]], out: str | Path, metadata: dict | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = [c for c in ("good_news", "negative_control") if gaps_by_condition.get(c)]
    parts = ax.violinplot([list(gaps_by_condition[c]) for c in names], showmedians=True)
    for body, c in zip(parts["bodies"], names):
        body.set_facecolor(CONDITION_COLORS[c])
        body.set_alpha(0.5)
    ax.axhline(0.0, color="#777777", lw=0.8, ls="--")
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("score gap (clean - corrupted)")
    return _save(fig, Path(out), metadata)


def plot_patch_vs_gap(summaries: Sequence[ConditionSummary], out: str | Path, metadata: dict | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for s in summaries:
        ax.scatter(s.max_patch_effects, s.gaps, s=10, alpha=0.7, color=CONDITION_COLORS.get(s.condition), label=s.condition)
    ax.set_xlabel("max patch effect")
    ax.set_ylabel("score gap")
    ax.legend(frameon=False)
    return _save(fig, Path(out), metadata)


def plot_steering_curves(summaries, out: str | Path, metadata: dict | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for s in summaries:
        ax.plot(
            [r["alpha"] for r in s.per_alpha], [r["mean_delta"] for r in s.per_alpha], marker="o",
            color=CONDITION_COLORS.get(s.condition), label=f"{s.condition} direction (layer {s.layer})",
        )
    ax.axhline(0.0, color="#777777", lw=0.8, ls="--")
    ax.set_xlabel("steering strength alpha")
    ax.set_ylabel("mean delta score")
    ax.legend(frameon=False)
    return _save(fig, Path(out), metadata)
