"""Report tables: gap and sign accuracy, flip rate, layer dissociation, patch-vs-gap, steering."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import DOMAINS
from .flip import FlipRecord, flip_rate
from .metric import CONDITIONS, sign_accuracy
from .patching import PatchSweepResult, lower_median
from .stats import mann_whitney_one_sided, spearman
from .steering import AlphaSweepSummary

GROUPINGS = ("overall", "by_domain")


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append({c: row.get(c) for c in self.columns})

    def to_delimited(self, manifest_hash: str = "", sep: str = "\t") -> str:
        lines = [f"# manifest_sha256={manifest_hash}"] if manifest_hash else []
        lines.append(sep.join(self.columns))
        for r in self.rows:
            lines.append(sep.join(_fmt(r[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        return [{c: _jsonable(r[c]) for c in self.columns} for r in self.rows]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _groups(sweeps: Sequence[PatchSweepResult], grouping: str) -> list[tuple[str, list[PatchSweepResult]]]:
    if grouping == "overall":
        return [("overall", list(sweeps))]
    if grouping != "by_domain":
        raise ValueError(f"unknown grouping {grouping!r}")
    present = sorted({s.domain for s in sweeps}, key=lambda d: (DOMAINS.index(d) if d in DOMAINS else len(DOMAINS), d))
    return [(d, [s for s in sweeps if s.domain == d]) for d in present]


def _split(rows: Sequence[PatchSweepResult]) -> dict[str, list[PatchSweepResult]]:
    return {c: sorted((r for r in rows if r.condition == c), key=lambda r: r.pair_id) for c in CONDITIONS}


def condition_report(
    sweeps: Sequence[PatchSweepResult],
    flips: Sequence[FlipRecord] = (),
    steer_summaries: Sequence[AlphaSweepSummary] = (),
    grouping: str = "overall",
    model_name: str = "",
) -> dict[str, Table]:
    """Every statistic of the gap, flip, dissociation, patch-vs-gap and steering tables.

    A group missing a condition still gets a row, flagged rather than dropped.
    """
    n_layers = len(sweeps[0].per_layer_effect) if sweeps else 0

    scores = Table("scores", ("model", "group", "condition", "n", "mean_gap", "sign_accuracy", "valid_pos", "valid_neg", "flagged"))
    dissoc = Table(
        "layer_dissociation",
        ("model", "group", "n_layers", "n_good", "n_neg", "median_top_good", "median_top_neg", "u", "p_value", "method", "flagged"),
    )
    pvg = Table("patch_vs_gap", ("model", "group", "condition", "n", "rho", "p_value", "flagged"))

    for group, rows in _groups(sweeps, grouping):
        split = _split(rows)
        for cond in CONDITIONS:
            sub = split[cond]
            if not sub:
                scores.add(model=model_name, group=group, condition=cond, n=0, flagged=True)
                pvg.add(model=model_name, group=group, condition=cond, n=0, flagged=True)
                continue
            gaps = [r.gap for r in sub]
            vp, vn = sub[0].valid_anchor_counts
            scores.add(
                model=model_name, group=group, condition=cond, n=len(sub), mean_gap=float(np.mean(gaps)),
                sign_accuracy=sign_accuracy(gaps, cond), valid_pos=vp, valid_neg=vn, flagged=False,
            )
            if len(sub) >= 3:
                sp = spearman([r.max_patch_effect for r in sub], gaps)
                pvg.add(model=model_name, group=group, condition=cond, n=len(sub), rho=sp.rho, p_value=sp.p_value, flagged=sp.flagged)
            else:
                pvg.add(model=model_name, group=group, condition=cond, n=len(sub), flagged=True)
        good, neg = split["good_news"], split["negative_control"]
        if good and neg:
            mw = mann_whitney_one_sided([r.top_layer for r in good], [r.top_layer for r in neg])
            dissoc.add(
                model=model_name, group=group, n_layers=n_layers, n_good=len(good), n_neg=len(neg),
                median_top_good=lower_median([r.top_layer for r in good]),
                median_top_neg=lower_median([r.top_layer for r in neg]),
                u=mw.u_statistic, p_value=mw.p_value, method=mw.method, flagged=mw.flagged,
            )
        else:
            dissoc.add(model=model_name, group=group, n_layers=n_layers, n_good=len(good), n_neg=len(neg), flagged=True)

    flip = Table("flip", ("model", "n", "flip_rate", "flagged"))
    if flips:
        flip.add(model=model_name, n=len(flips), flip_rate=flip_rate(flips), flagged=False)
    else:
        flip.add(model=model_name, n=0, flagged=True)

    steer = Table(
        "steering",
        ("model", "direction", "layer", "pct_shifted_pos", "pct_shifted_neg", "mean_delta_pos", "spearman_rho", "spearman_p", "flagged"),
    )
    for s in steer_summaries:
        steer.add(
            model=model_name, direction=s.condition, layer=s.layer, pct_shifted_pos=s.shifted_positive,
            pct_shifted_neg=s.shifted_negative, mean_delta_pos=s.mean_delta_positive,
            spearman_rho=s.spearman_rho, spearman_p=s.spearman_p,
            flagged=s.spearman_flagged or s.shifted_positive is None,
        )
    return {t.name: t for t in (scores, flip, dissoc, pvg, steer)}


def anchor_sensitivity(gaps: Mapping[str, Mapping[str, Mapping[int, float]]], model_name: str = "") -> Table:
    """Mean gap per anchor set and pairwise Spearman rho of per-prompt gaps.

    ``gaps[anchor_set][condition][pair_id]`` holds one gap per prompt.
    """
    names = list(gaps)
    cols = ["model", "condition"] + [f"mean_gap_{n}" for n in names]
    pairs = list(itertools.combinations(names, 2))
    cols += [f"rho_{a}_vs_{b}" for a, b in pairs]
    table = Table("anchor_sensitivity", tuple(cols))
    for cond in CONDITIONS:
        row = {"model": model_name, "condition": cond}
        for n in names:
            vals = list(gaps[n].get(cond, {}).values())
            row[f"mean_gap_{n}"] = float(np.mean(vals)) if vals else None
        for a, b in pairs:
            ids = sorted(set(gaps[a].get(cond, {})) & set(gaps[b].get(cond, {})))
            if len(ids) >= 3:
                row[f"rho_{a}_vs_{b}"] = spearman([gaps[a][cond][i] for i in ids], [gaps[b][cond][i] for i in ids]).rho
        table.add(**row)
    return table
