"""Mean-difference valence directions and additive steering of neutral prompts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metric import ResolvedAnchors, score
from .model import Edit, HookPoint, ModelBundle, forward
from .stats import spearman
from .text import ChatTemplate, TokenizedPair, default_template, render_and_tokenize

DEFAULT_ALPHAS = (-20.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0)


class SteeringError(ValueError):
    pass


@dataclass(frozen=True)
class SteeringDirection:
    layer: int
    condition: str
    direction: torch.Tensor  # unit norm, float64
    raw_norm: float
    n_pairs: int
    sample_seed: int
    pair_indices: tuple[int, ...] = ()

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "condition": self.condition,
            "raw_norm": self.raw_norm,
            "n_pairs": self.n_pairs,
            "sample_seed": self.sample_seed,
            "pair_indices": list(self.pair_indices),
            "direction": self.direction.tolist(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        rec = {**(extra or {}), **self.to_record()}
        path.write_text(json.dumps(rec, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SteeringDirection":
        rec = json.loads(Path(path).read_text())
        return cls(
            layer=int(rec["layer"]),
            condition=rec["condition"],
            direction=torch.tensor(rec["direction"], dtype=torch.float64),
            raw_norm=float(rec["raw_norm"]),
            n_pairs=int(rec["n_pairs"]),
            sample_seed=int(rec["sample_seed"]),
            pair_indices=tuple(rec.get("pair_indices", ())),
        )


@dataclass(frozen=True)
class SteerOutcome:
    prompt_index: int
    alpha: float
    base_score: float
    steered_score: float

    @property
    def delta(self) -> float:
        return self.steered_score - self.base_score

    def to_record(self) -> dict:
        return {
            "prompt_index": self.prompt_index,
            "alpha": self.alpha,
            "base_score": self.base_score,
            "steered_score": self.steered_score,
            "delta": self.delta,
        }


def _final_resid(bundle: ModelBundle, tokens, mask, layer: int) -> torch.Tensor:
    rec = forward(bundle, tokens, mask, capture=[HookPoint(layer, -1)])
    return rec.cached_activations[(layer, len(tokens) - 1)].to(torch.float64)


def extract_direction(
    bundle: ModelBundle,
    pairs: Sequence[TokenizedPair],
    layer: int,
    n_pairs: int,
    seed: int,
    condition: str = "good_news",
) -> SteeringDirection:
    """Unit vector along the mean clean-minus-corrupted final-position residual at ``layer``.

    ``n_pairs`` pairs are drawn without replacement using ``seed``.
    """
    if not 0 <= layer < bundle.config.n_layers:
        raise SteeringError(f"layer {layer} out of range [0, {bundle.config.n_layers})")
    if not 1 <= n_pairs <= len(pairs):
        raise SteeringError(f"n_pairs={n_pairs} but only {len(pairs)} pairs are available")
    rng = np.random.default_rng(seed)
    chosen = [int(i) for i in rng.choice(len(pairs), size=n_pairs, replace=False)]
    total = torch.zeros(bundle.config.d_model, dtype=torch.float64)
    for i in chosen:
        p = pairs[i]
        total += _final_resid(bundle, p.clean_tokens, p.clean_mask, layer) - _final_resid(
            bundle, p.corrupted_tokens, p.corrupted_mask, layer
        )
    mean = total / n_pairs
    raw_norm = float(torch.linalg.vector_norm(mean))
    if raw_norm == 0.0 or not np.isfinite(raw_norm):
        raise SteeringError("mean activation difference has zero norm")
    return SteeringDirection(layer, condition, mean / raw_norm, raw_norm, n_pairs, seed, tuple(chosen))


def _tokens(bundle: ModelBundle, prompt, template: ChatTemplate | None) -> list[int]:
    if isinstance(prompt, str):
        return render_and_tokenize(bundle, template or default_template(bundle), prompt)
    return list(prompt)


def _score_tokens(bundle, tokens, anchors, edits=()) -> float:
    return score(forward(bundle, tokens, edits=edits).logits, anchors).score


def steer_and_score(
    bundle: ModelBundle,
    prompt: str | Sequence[int],
    direction: SteeringDirection,
    alpha: float,
    anchors: ResolvedAnchors,
    template: ChatTemplate | None = None,
    prompt_index: int = 0,
    base_score: float | None = None,
) -> SteerOutcome:
    """Score a prompt with and without ``alpha * direction`` added at the final position."""
    if not np.isfinite(alpha):
        raise SteeringError("alpha must be finite")
    if tuple(direction.direction.shape) != (bundle.config.d_model,):
        raise SteeringError(
            f"direction has dimension {tuple(direction.direction.shape)}, model expects {bundle.config.d_model}"
        )
    if not 0 <= direction.layer < bundle.config.n_layers:
        raise SteeringError(f"direction layer {direction.layer} outside the model")
    tokens = _tokens(bundle, prompt, template)
    base = _score_tokens(bundle, tokens, anchors) if base_score is None else base_score
    if alpha == 0:
        return SteerOutcome(prompt_index, float(alpha), base, base)
    edit = Edit(HookPoint(direction.layer, -1), alpha * direction.direction, "add")
    return SteerOutcome(prompt_index, float(alpha), base, _score_tokens(bundle, tokens, anchors, [edit]))


@dataclass
class AlphaSweepSummary:
    condition: str
    layer: int
    alphas: tuple[float, ...]
    outcomes: list[SteerOutcome]
    per_alpha: list[dict] = field(default_factory=list)
    spearman_rho: float = float("nan")
    spearman_p: float = float("nan")
    spearman_flagged: bool = False

    def at(self, alpha: float) -> dict | None:
        for row in self.per_alpha:
            if row["alpha"] == alpha:
                return row
        return None

    @property
    def shifted_positive(self) -> float | None:
        row = self.at(10.0)
        return None if row is None else row["pct_positive"]

    @property
    def shifted_negative(self) -> float | None:
        row = self.at(-10.0)
        return None if row is None else row["pct_negative"]

    @property
    def mean_delta_positive(self) -> float | None:
        row = self.at(10.0)
        return None if row is None else row["mean_delta"]

    def to_record(self) -> dict:
        return {
            "condition": self.condition,
            "layer": self.layer,
            "alphas": list(self.alphas),
            "per_alpha": self.per_alpha,
            "shifted_positive_at_plus10": self.shifted_positive,
            "shifted_negative_at_minus10": self.shifted_negative,
            "mean_delta_at_plus10": self.mean_delta_positive,
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "spearman_flagged": self.spearman_flagged,
        }


def alpha_sweep(
    bundle: ModelBundle,
    prompts: Sequence[str | Sequence[int]],
    direction: SteeringDirection,
    alphas: Sequence[float],
    anchors: ResolvedAnchors,
    template: ChatTemplate | None = None,
) -> AlphaSweepSummary:
    """Steer every prompt at every alpha and summarise the shifts.

    ``pct_positive`` counts prompts with delta > 0 at that alpha.
    ``pct_negative`` counts delta < 0.
    """
    if not prompts or not alphas:
        raise SteeringError("alpha_sweep needs prompts and alphas")
    alphas = tuple(float(a) for a in alphas)
    outcomes: list[SteerOutcome] = []
    for i, prompt in enumerate(prompts):
        tokens = _tokens(bundle, prompt, template)
        base = _score_tokens(bundle, tokens, anchors)
        for a in alphas:
            outcomes.append(steer_and_score(bundle, tokens, direction, a, anchors, prompt_index=i, base_score=base))
    per_alpha = []
    for a in alphas:
        deltas = [o.delta for o in outcomes if o.alpha == a]
        per_alpha.append(
            {
                "alpha": a,
                "pct_positive": sum(d > 0 for d in deltas) / len(deltas),
                "pct_negative": sum(d < 0 for d in deltas) / len(deltas),
                "mean_delta": float(np.mean(deltas)),
            }
        )
    summary = AlphaSweepSummary(direction.condition, direction.layer, alphas, outcomes, per_alpha)
    if len(outcomes) >= 3:
        sp = spearman([o.alpha for o in outcomes], [o.delta for o in outcomes])
        summary.spearman_rho, summary.spearman_p, summary.spearman_flagged = sp.rho, sp.p_value, sp.flagged
    return summary
