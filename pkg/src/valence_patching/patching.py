"""Residual-stream activation patching: per-layer sweeps and layer x position heatmaps."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .metric import ResolvedAnchors, score
from .model import ModelBundle, forward_from, resid_trace
from .text import TokenizedPair


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSweepResult:
    pair_id: int
    condition: str
    clean_score: float
    corrupted_score: float
    gap: float
    per_layer_effect: tuple[float, ...]
    top_layer: int
    max_patch_effect: float
    valid_anchor_counts: tuple[int, int]
    domain: str = ""

    def to_record(self) -> dict:
        d = asdict(self)
        d["per_layer_effect"] = list(self.per_layer_effect)
        d["valid_anchor_counts"] = list(self.valid_anchor_counts)
        return d

    @classmethod
    def from_record(cls, rec: dict) -> "PatchSweepResult":
        rec = dict(rec)
        rec["per_layer_effect"] = tuple(rec["per_layer_effect"])
        rec["valid_anchor_counts"] = tuple(rec["valid_anchor_counts"])
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__ if k in rec})


@dataclass(frozen=True)
class HeatmapResult:
    pair_id: int
    effects: tuple[tuple[float, ...], ...]  # [n_layers][seq_len]
    token_labels: tuple[str, ...]
    pad_flags: tuple[bool, ...] = ()
    shared_prefix_len: int = 0
    condition: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.effects), len(self.token_labels)

    def to_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "condition": self.condition,
            "effects": [list(r) for r in self.effects],
            "token_labels": list(self.token_labels),
            "pad_flags": list(self.pad_flags),
            "shared_prefix_len": self.shared_prefix_len,
        }


def restoration_sign(gap: float) -> float:
    """Direction in which patching moves the score back toward the clean run.

    A zero gap has no direction and is treated as positive.
    """
    return -1.0 if gap < 0 else 1.0


def select_top_layer(effects: Sequence[float], gap: float) -> int:
    """Layer with the largest restoration-signed effect; ties go to the lowest layer."""
    s = restoration_sign(gap)
    best, best_val = 0, None
    for layer, e in enumerate(effects):
        v = e * s
        if best_val is None or v > best_val:
            best, best_val = layer, v
    return best


@dataclass
class _PatchRun:
    bundle: ModelBundle
    anchors: ResolvedAnchors
    corrupted_trace: torch.Tensor  # [n_layers, T, d]
    corrupted_mask: torch.Tensor
    clean_cache: torch.Tensor  # [n_layers, T or 1, d]
    clean_score: float
    corrupted_score: float
    final_only: bool = True

    def patched_score(self, layer: int, pos: int) -> float:
        src = self.clean_cache[layer, -1] if self.final_only else self.clean_cache[layer, pos]
        if torch.equal(src, self.corrupted_trace[layer, pos]):
            # identical vectors (e.g. the shared prefix): the patch is a no-op
            return self.corrupted_score
        resid = self.corrupted_trace[layer].clone()
        resid[pos] = src
        rec = forward_from(self.bundle, layer, resid, self.corrupted_mask)
        return score(rec.logits, self.anchors).score


def _prepare(bundle: ModelBundle, pair: TokenizedPair, anchors: ResolvedAnchors, final_only: bool) -> _PatchRun:
    if len(pair.clean_tokens) != len(pair.corrupted_tokens):
        raise PatchError("pair must be padded to equal length")
    clean_trace, clean_logits = resid_trace(bundle, pair.clean_tokens, pair.clean_mask)
    corr_trace, corr_logits = resid_trace(bundle, pair.corrupted_tokens, pair.corrupted_mask)
    if clean_trace.shape[0] != bundle.config.n_layers:
        raise PatchError("layer-count mismatch between cache and bundle")
    # the layer sweep only needs the final position
    cache = clean_trace[:, -1:].clone() if final_only else clean_trace
    return _PatchRun(
        bundle=bundle,
        anchors=anchors,
        corrupted_trace=corr_trace,
        corrupted_mask=torch.as_tensor(pair.corrupted_mask, dtype=torch.bool),
        clean_cache=cache,
        clean_score=score(clean_logits, anchors).score,
        corrupted_score=score(corr_logits, anchors).score,
        final_only=final_only,
    )


def patch_sweep(
    bundle: ModelBundle,
    pair: TokenizedPair,
    anchors: ResolvedAnchors,
    pair_id: int = 0,
    condition: str = "good_news",
    domain: str = "",
) -> PatchSweepResult:
    """Patch the clean final-position residual into the corrupted run at each layer."""
    run = _prepare(bundle, pair, anchors, final_only=True)
    last = len(pair.corrupted_tokens) - 1
    effects = tuple(run.patched_score(l, last) - run.corrupted_score for l in range(bundle.config.n_layers))
    gap = run.clean_score - run.corrupted_score
    top = select_top_layer(effects, gap)
    return PatchSweepResult(
        pair_id=pair_id,
        condition=condition,
        clean_score=run.clean_score,
        corrupted_score=run.corrupted_score,
        gap=gap,
        per_layer_effect=effects,
        top_layer=top,
        max_patch_effect=effects[top],
        valid_anchor_counts=anchors.valid_counts,
        domain=domain,
    )


def patch_heatmap(
    bundle: ModelBundle,
    pair: TokenizedPair,
    anchors: ResolvedAnchors,
    pair_id: int = 0,
    condition: str = "",
) -> HeatmapResult:
    """Single-cell patch effect for every (layer, position).

    Positions that are padding in either sequence are skipped. Their cells
    are recorded as 0 and flagged in ``pad_flags``.
    """
    run = _prepare(bundle, pair, anchors, final_only=False)
    T = len(pair.corrupted_tokens)
    pads = tuple(not (a and b) for a, b in zip(pair.clean_mask, pair.corrupted_mask))
    rows = []
    for l in range(bundle.config.n_layers):
        row = []
        for p in range(T):
            row.append(0.0 if pads[p] else run.patched_score(l, p) - run.corrupted_score)
        rows.append(tuple(row))
    tok = bundle.tokenizer
    labels = tuple("<pad>" if not m else tok.id_to_token(t) for t, m in zip(pair.clean_tokens, pair.clean_mask))
    return HeatmapResult(pair_id, tuple(rows), labels, pads, pair.shared_prefix_len, condition)


@dataclass(frozen=True)
class ConditionSummary:
    condition: str
    median_top_layer: int
    top_layer_counts: dict[int, int]
    pair_ids: tuple[int, ...]
    top_layers: tuple[int, ...]
    max_patch_effects: tuple[float, ...]
    gaps: tuple[float, ...]
    domains: tuple[str, ...] = field(default=())


def lower_median(values: Sequence[int]) -> int:
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def summarize_sweeps(results: Sequence[PatchSweepResult]) -> ConditionSummary:
    if not results:
        raise PatchError("summarize_sweeps needs at least one result")
    conditions = {r.condition for r in results}
    if len(conditions) > 1:
        raise PatchError(f"mixed conditions in one summary: {sorted(conditions)}")
    ordered = sorted(results, key=lambda r: r.pair_id)
    tops = tuple(r.top_layer for r in ordered)
    return ConditionSummary(
        condition=ordered[0].condition,
        median_top_layer=lower_median(tops),
        top_layer_counts=dict(sorted(Counter(tops).items())),
        pair_ids=tuple(r.pair_id for r in ordered),
        top_layers=tops,
        max_patch_effects=tuple(r.max_patch_effect for r in ordered),
        gaps=tuple(r.gap for r in ordered),
        domains=tuple(r.domain for r in ordered),
    )

