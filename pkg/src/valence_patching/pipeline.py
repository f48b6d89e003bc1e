"""Experiment runner behind the CLI.

A run lives in one output directory. ``manifest.json`` there fixes the model,
corpus, anchors, seed, alphas, precision and prompt template; every file the
run writes carries the manifest's sha256. The hash covers only settings that
change results, so two runs into different directories produce identical
bytes apart from the recorded output path.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from . import figures
from .corpus import Corpus, PromptPair, default_corpus_dir, load_corpus
from .flip import FlipRecord, flip_records
from .metric import CONDITIONS, AnchorSet, load_anchor_set, score
from .model import ModelBundle, forward, load_model
from .patching import PatchSweepResult, lower_median, patch_heatmap, patch_sweep, summarize_sweeps
from .report import GROUPINGS, Table, anchor_sensitivity, condition_report
from .steering import DEFAULT_ALPHAS, AlphaSweepSummary, SteeringDirection, alpha_sweep, extract_direction
from .text import SYSTEM_PROMPT, ChatTemplate, TokenizedPair, render_and_tokenize, resolve_anchors, tokenize_pair

log = logging.getLogger(__name__)

STAGES = ("score", "patch-sweep", "heatmap", "flip-test", "extract-direction", "steer", "stats", "figures")
THREADS_ENV = "VALENCE_THREADS"


class ManifestConflict(ValueError):
    pass


def _sha256_files(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def model_fingerprint(path: str | Path) -> str:
    """Hash of the config descriptor plus the name and size of every weight file."""
    path = Path(path)
    h = hashlib.sha256()
    cfg = path / "config.json"
    if cfg.is_file():
        h.update(cfg.read_bytes())
    for f in sorted(path.glob("*.safetensors")):
        h.update(f"{f.name}:{f.stat().st_size}".encode())
    return h.hexdigest()


def corpus_fingerprint(path: str | Path | None) -> str:
    root = Path(path) if path else default_corpus_dir()
    if root.is_file():
        root = root.parent
    return _sha256_files(p for p in (root / n for n in ("pairs.jsonl", "neutral.txt", "lexicon.txt")) if p.is_file())


@dataclass(frozen=True)
class RunManifest:
    model: str
    corpus: str = ""
    anchors: str = "default"
    seed: int = 0
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    precision: str = "float32"
    template: str = ""
    system_prompt: str = SYSTEM_PROMPT
    n_pairs: int = 50
    limit: int | None = None
    out: str = ""
    stages: tuple[str, ...] = ()
    model_fingerprint: str = ""
    corpus_fingerprint: str = ""
    anchor_words: dict = field(default_factory=dict)

    @classmethod
    def build(cls, model: str | Path, out: str | Path, corpus: str | Path | None = None, **kw) -> "RunManifest":
        anchors = load_anchor_set(kw.get("anchors", "default"))
        return cls(
            model=str(Path(model).resolve()),
            corpus=str(Path(corpus).resolve()) if corpus else "",
            out=str(Path(out).resolve()),
            model_fingerprint=model_fingerprint(model),
            corpus_fingerprint=corpus_fingerprint(corpus),
            anchor_words={"name": anchors.name, "positive": list(anchors.positive), "negative": list(anchors.negative)},
            **{k: (tuple(float(a) for a in v) if k == "alphas" else v) for k, v in kw.items()},
        )

    def identity(self) -> dict:
        d = asdict(self)
        for k in ("out", "stages"):
            d.pop(k)
        d["alphas"] = list(self.alphas)
        return d

    @property
    def sha256(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_record(self) -> dict:
        return {**self.identity(), "out": self.out, "stages": list(self.stages), "manifest_sha256": self.sha256}

    @property
    def anchor_set(self) -> AnchorSet:
        w = self.anchor_words
        return AnchorSet(w["name"], tuple(w["positive"]), tuple(w["negative"]))


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def configure_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        torch.set_num_threads(max(1, int(n)))


class Experiment:
    """Shared state for the pipeline stages of one output directory."""

    def __init__(self, manifest: RunManifest, workers: int = 1, force: bool = False):
        self.manifest = manifest
        self.workers = max(1, int(workers))
        self.out = Path(manifest.out)
        self.hash = manifest.sha256
        self._bundle: ModelBundle | None = None
        self._anchors = None
        self.corpus: Corpus = load_corpus(manifest.corpus or None)
        self._claim(force)

    # -- manifest ---------------------------------------------------------

    def _claim(self, force: bool) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        if path.exists() and not force:
            try:
                prev = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ManifestConflict(f"unreadable manifest {path}: {exc}") from exc
            if prev.get("manifest_sha256") != self.hash:
                changed = sorted(k for k, v in self.manifest.identity().items() if prev.get(k) != _jsonable(v))
                raise ManifestConflict(
                    f"{path} was written by a different configuration (differs in: {', '.join(changed) or 'hash'}); "
                    "use a new --out directory or --force"
                )
        self.write_json("manifest.json", self.manifest.to_record(), stamp=False)

    def check_stamp(self, rec: dict, source: str) -> None:
        if rec.get("manifest_sha256") != self.hash:
            raise ManifestConflict(f"{source} was produced under manifest {rec.get('manifest_sha256')}, not {self.hash}")

    # -- lazily loaded inputs ----------------------------------------------

    @property
    def bundle(self) -> ModelBundle:
        if self._bundle is None:
            self._bundle = load_model(self.manifest.model, precision=self.manifest.precision)
        return self._bundle

    @property
    def template(self) -> ChatTemplate:
        return ChatTemplate(self.manifest.template or self.bundle.chat_template_id, self.manifest.system_prompt)

    @property
    def anchors(self):
        if self._anchors is None:
            self._anchors = resolve_anchors(self.bundle, self.manifest.anchor_set)
            pos, neg = self._anchors.valid_counts
            log.info("anchors %s: %d positive, %d negative single-token words", self._anchors.source_set, pos, neg)
        return self._anchors

    def pairs(self, condition: str | None = None) -> list[PromptPair]:
        ids = self.corpus.ids
        if self.manifest.limit is not None:
            ids = ids[: self.manifest.limit]
        keep = set(ids)
        conds = CONDITIONS if condition is None else (condition,)
        out = [p for c in conds for p in self.corpus.condition(c) if p.id in keep]
        return sorted(out, key=lambda p: (p.id, CONDITIONS.index(p.condition)))

    def tokenize(self, pair: PromptPair) -> TokenizedPair:
        return tokenize_pair(self.bundle, self.template, pair.clean_text, pair.corrupted_text)

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` over items, in a thread pool when workers > 1, keeping input order."""
        if self.workers == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    # -- writers (called from the main thread only) -------------------------

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, rec: dict, stamp: bool = True) -> Path:
        body = {"manifest_sha256": self.hash, **rec} if stamp else rec
        p = self.path(name)
        p.write_text(json.dumps(_jsonable(body), indent=1, sort_keys=True) + "\n")
        return p

    def write_jsonl(self, name: str, records: Iterable[dict]) -> Path:
        p = self.path(name)
        lines = (json.dumps(_jsonable({"manifest_sha256": self.hash, **r}), sort_keys=True) for r in records)
        p.write_text("".join(ln + "\n" for ln in lines))
        return p

    def read_jsonl(self, name: str) -> list[dict]:
        p = self.out / name
        if not p.is_file():
            raise FileNotFoundError(f"{p} not found; run the stage that produces it first")
        recs = [json.loads(ln) for ln in p.read_text().splitlines() if ln.strip()]
        for r in recs:
            self.check_stamp(r, str(p))
        return recs

    def write_table(self, table: Table, suffix: str = "") -> Path:
        p = self.path(f"tables/{table.name}{suffix}.tsv")
        p.write_text(table.to_delimited(self.hash))
        return p

    # -- stages -------------------------------------------------------------

    def _score_pair(self, pair: PromptPair, anchors) -> dict:
        b, t = self.bundle, self.template
        clean = score(forward(b, render_and_tokenize(b, t, pair.clean_text)).logits, anchors).score
        corrupted = score(forward(b, render_and_tokenize(b, t, pair.corrupted_text)).logits, anchors).score
        return {
            "anchor_set": anchors.source_set,
            "pair_id": pair.id,
            "condition": pair.condition,
            "domain": pair.domain,
            "clean_score": clean,
            "corrupted_score": corrupted,
            "gap": clean - corrupted,
            "valid_anchor_counts": list(anchors.valid_counts),
        }

    def run_score(self, anchor_sets: Sequence[str] = ()) -> list[dict]:
        """Clean and corrupted scores per pair, for the manifest anchors plus any extra sets."""
        sets = [self.manifest.anchor_set] + [load_anchor_set(s) for s in anchor_sets]
        seen, resolved = set(), []
        for s in sets:
            if s.name in seen:
                continue
            seen.add(s.name)
            resolved.append(self.anchors if s == self.manifest.anchor_set else resolve_anchors(self.bundle, s))
        pairs = self.pairs()
        records = []
        for anchors in resolved:
            records += self.map(lambda p, a=anchors: self._score_pair(p, a), pairs)
        self.write_jsonl("scores.jsonl", records)
        if len(resolved) > 1:
            gaps: dict = {}
            for r in records:
                gaps.setdefault(r["anchor_set"], {}).setdefault(r["condition"], {})[r["pair_id"]] = r["gap"]
            self.write_table(anchor_sensitivity(gaps, self.model_name))
        return records

    @property
    def model_name(self) -> str:
        return Path(self.manifest.model).name

    def run_sweeps(self) -> list[PatchSweepResult]:
        def one(pair: PromptPair) -> PatchSweepResult:
            return patch_sweep(self.bundle, self.tokenize(pair), self.anchors, pair.id, pair.condition, pair.domain)

        self.anchors  # resolve once before fanning out
        results = self.map(one, self.pairs())
        self.write_jsonl("sweeps.jsonl", (r.to_record() for r in results))
        flat = Table("patch_effects", ("pair_id", "condition", "domain", "layer", "effect"))
        for r in results:
            for layer, e in enumerate(r.per_layer_effect):
                flat.add(pair_id=r.pair_id, condition=r.condition, domain=r.domain, layer=layer, effect=e)
        self.write_table(flat)
        summaries = [summarize_sweeps([r for r in results if r.condition == c]) for c in CONDITIONS if any(r.condition == c for r in results)]
        for s in summaries:
            log.info("%s: median top layer %d, counts %s", s.condition, s.median_top_layer, s.top_layer_counts)
        figures.emit_layer_scatter(
            summaries, self.path("figures/layer_scatter.svg"), self.bundle.config.n_layers, self.manifest.seed, self.hash
        )
        return results

    def load_sweeps(self) -> list[PatchSweepResult]:
        return [PatchSweepResult.from_record(r) for r in self.read_jsonl("sweeps.jsonl")]

    def run_heatmaps(self, targets: Sequence[tuple[int, str]]) -> list[Path]:
        index = {(p.id, p.condition): p for p in self.corpus.pairs}
        missing = [t for t in targets if t not in index]
        if missing:
            raise KeyError(f"no prompt pair for (id, condition) {missing}")
        anchors = self.anchors

        def one(t):
            p = index[t]
            return patch_heatmap(self.bundle, self.tokenize(p), anchors, p.id, p.condition)

        written = []
        for hm in self.map(one, list(targets)):
            stem = f"heatmaps/heatmap_{hm.pair_id}_{hm.condition}"
            written.append(self.write_json(stem + ".json", hm.to_record()))
            written.append(figures.emit_heatmap_svg(hm, self.path(stem + ".svg"), self.hash))
        return written

    def _gaps(self) -> dict[str, dict[int, float]]:
        if (self.out / "sweeps.jsonl").is_file():
            rows = [(r.condition, r.pair_id, r.gap) for r in self.load_sweeps()]
        else:
            rows = [(r["condition"], r["pair_id"], r["gap"]) for r in self.map(lambda p: self._score_pair(p, self.anchors), self.pairs())]
        gaps: dict[str, dict[int, float]] = {c: {} for c in CONDITIONS}
        for cond, pid, gap in rows:
            gaps[cond][pid] = gap
        return gaps

    def run_flip(self) -> list[FlipRecord]:
        gaps = self._gaps()
        recs = flip_records(gaps["good_news"], gaps["negative_control"])
        self.write_jsonl("flip.jsonl", (r.to_record() for r in recs))
        return recs

    def load_flips(self) -> list[FlipRecord]:
        return [FlipRecord(r["pair_id"], r["gap_good_news"], r["gap_negative_control"]) for r in self.read_jsonl("flip.jsonl")]

    def run_extract(self, condition: str, layer: int | None = None, n_pairs: int | None = None) -> SteeringDirection:
        if condition not in CONDITIONS:
            raise ValueError(f"unknown condition {condition!r}")
        if layer is None:
            tops = [r.top_layer for r in self.load_sweeps() if r.condition == condition]
            if not tops:
                raise ValueError(f"sweeps.jsonl has no {condition} rows to pick a layer from; pass --layer")
            layer = lower_median(tops)
            log.info("using median top layer %d for %s", layer, condition)
        pairs = self.pairs(condition)
        n = self.manifest.n_pairs if n_pairs is None else n_pairs
        if n > len(pairs):
            log.warning("n_pairs=%d exceeds the %d available %s pairs; using all", n, len(pairs), condition)
            n = len(pairs)
        tokenized = [self.tokenize(p) for p in pairs]
        d = extract_direction(self.bundle, tokenized, layer, n, self.manifest.seed, condition)
        d.save(self.path(f"direction_{condition}.json"), {"manifest_sha256": self.hash, "pair_ids": [pairs[i].id for i in d.pair_indices]})
        return d

    def load_direction(self, path: str | Path) -> SteeringDirection:
        rec = json.loads(Path(path).read_text())
        if "manifest_sha256" in rec and rec["manifest_sha256"] != self.hash:
            log.warning("%s was extracted under manifest %s", path, rec["manifest_sha256"])
        d = SteeringDirection.load(path)
        if d.direction.numel() != self.bundle.config.d_model:
            raise ValueError(f"{path}: direction has dimension {d.direction.numel()}, model expects {self.bundle.config.d_model}")
        return d

    def run_steer(self, direction_paths: Sequence[str | Path] = ()) -> list[AlphaSweepSummary]:
        paths = list(direction_paths) or sorted(self.out.glob("direction_*.json"))
        if not paths:
            raise FileNotFoundError("no steering direction given and none found in the output directory")
        prompts = list(self.corpus.neutral_prompts)
        if not prompts:
            raise ValueError("corpus has no neutral prompts")
        tokens = [render_and_tokenize(self.bundle, self.template, p) for p in prompts]
        anchors = self.anchors
        summaries = []
        for path in paths:
            d = self.load_direction(path)
            s = alpha_sweep(self.bundle, tokens, d, self.manifest.alphas, anchors)
            self.write_jsonl(f"steer_{d.condition}.jsonl", (o.to_record() for o in s.outcomes))
            self.write_json(f"steer_summary_{d.condition}.json", s.to_record())
            summaries.append(s)
        return summaries

    def load_steer_summaries(self) -> list[AlphaSweepSummary]:
        out = []
        for c in CONDITIONS:
            p = self.out / f"steer_summary_{c}.json"
            if not p.is_file():
                continue
            rec = json.loads(p.read_text())
            self.check_stamp(rec, str(p))
            s = AlphaSweepSummary(rec["condition"], rec["layer"], tuple(rec["alphas"]), [], rec["per_alpha"])
            s.spearman_rho = _nan(rec["spearman_rho"])
            s.spearman_p = _nan(rec["spearman_p"])
            s.spearman_flagged = rec["spearman_flagged"]
            out.append(s)
        return out

    def run_stats(self, groupings: Sequence[str] = GROUPINGS) -> dict[str, Table]:
        sweeps = self.load_sweeps()
        flips = self.load_flips() if (self.out / "flip.jsonl").is_file() else flip_records(*self._gaps().values())
        steer = self.load_steer_summaries()
        written = {}
        for g in groupings:
            for name, table in condition_report(sweeps, flips, steer, g, self.model_name).items():
                # flip and steering tables do not depend on the grouping
                key = name if name in ("flip", "steering") else f"{name}_{g}"
                if key not in written:
                    self.write_table(table, key[len(name):])
                    written[key] = table
        return written

    def run_figures(self) -> list[Path]:
        """Supplementary matplotlib figures; PNG metadata carries the manifest hash."""
        sweeps = self.load_sweeps()
        meta = {"Description": f"manifest_sha256={self.hash}"}
        by_cond = {c: [r for r in sweeps if r.condition == c] for c in CONDITIONS}
        summaries = [summarize_sweeps(v) for v in by_cond.values() if v]
        out = [
            figures.plot_gap_distributions({c: [r.gap for r in v] for c, v in by_cond.items()}, self.path("figures/gap_distributions.png"), meta),
            figures.plot_patch_vs_gap(summaries, self.path("figures/patch_vs_gap.png"), meta),
        ]
        steer = self.load_steer_summaries()
        if steer:
            out.append(figures.plot_steering_curves(steer, self.path("figures/steering_curves.png"), meta))
        return out

    def run_report(self, skip: Sequence[str] = (), heatmap_targets: Sequence[tuple[int, str]] | None = None) -> None:
        unknown = set(skip) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stage(s) to skip: {sorted(unknown)}")
        todo = [s for s in STAGES if s not in skip]
        if "score" in todo:
            self.run_score()
        if "patch-sweep" in todo:
            self.run_sweeps()
        if "heatmap" in todo:
            if heatmap_targets is None:
                first = self.pairs()[0].id
                heatmap_targets = [(first, c) for c in CONDITIONS]
            self.run_heatmaps(heatmap_targets)
        if "flip-test" in todo:
            self.run_flip()
        if "extract-direction" in todo:
            for c in CONDITIONS:
                self.run_extract(c)
        if "steer" in todo:
            self.run_steer()
        if "stats" in todo:
            self.run_stats()
        if "figures" in todo:
            self.run_figures()


def _nan(v):
    return float("nan") if v is None else v
