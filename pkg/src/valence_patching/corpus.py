"""Prompt-pair corpus: loading, validation and id alignment.

On-disk layout (one directory)::

    pairs.jsonl    one JSON object per line:
                   {"id": int, "condition": "good_news" | "negative_control",
                    "domain": "academia" | "career" | "personal",
                    "clean": str, "corrupted": str}
    neutral.txt    one neutral steering prompt per line
    lexicon.txt    outcome words that must not occur in neutral prompts
                   (one per line, '#' starts a comment)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .metric import CONDITIONS

DOMAINS = ("academia", "career", "personal")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPair:
    id: int
    condition: str
    domain: str
    clean_text: str
    corrupted_text: str

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "condition": self.condition,
            "domain": self.domain,
            "clean": self.clean_text,
            "corrupted": self.corrupted_text,
        }


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[PromptPair, ...]
    neutral_prompts: tuple[str, ...] = ()
    lexicon: tuple[str, ...] = field(default=(), compare=False)

    def condition(self, name: str) -> list[PromptPair]:
        return sorted((p for p in self.pairs if p.condition == name), key=lambda p: p.id)

    @property
    def ids(self) -> list[int]:
        return sorted({p.id for p in self.pairs})


def default_corpus_dir() -> Path:
    return Path(str(resources.files("valence_patching") / "data"))


def _resolve(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.is_dir():
        return path / "pairs.jsonl", path
    return path, path.parent


def validate(corpus: Corpus) -> None:
    seen: dict[tuple[int, str], PromptPair] = {}
    for p in corpus.pairs:
        where = f"id {p.id} ({p.condition})"
        if p.condition not in CONDITIONS:
            raise CorpusError(f"{where}: unknown condition")
        if p.domain not in DOMAINS:
            raise CorpusError(f"{where}: unknown domain {p.domain!r}")
        if not p.clean_text.strip() or not p.corrupted_text.strip():
            raise CorpusError(f"{where}: empty text field")
        if p.clean_text == p.corrupted_text:
            raise CorpusError(f"{where}: clean text equals corrupted text")
        if (p.id, p.condition) in seen:
            raise CorpusError(f"{where}: duplicate id")
        seen[(p.id, p.condition)] = p
    for pid in sorted({k[0] for k in seen}):
        good, neg = seen.get((pid, "good_news")), seen.get((pid, "negative_control"))
        if good is None or neg is None:
            raise CorpusError(f"id {pid}: shared-baseline violation, both conditions are required")
        if good.corrupted_text != neg.corrupted_text:
            raise CorpusError(f"id {pid}: shared-baseline violation, corrupted texts differ")
        if good.domain != neg.domain:
            raise CorpusError(f"id {pid}: conditions disagree on domain")
    if corpus.lexicon:
        pattern = re.compile(r"\b(" + "|".join(map(re.escape, corpus.lexicon)) + r")\b", re.IGNORECASE)
        for i, text in enumerate(corpus.neutral_prompts):
            m = pattern.search(text)
            if m:
                raise CorpusError(f"neutral prompt {i}: contains outcome word {m.group(0)!r}")


def _read_lines(path: Path) -> tuple[str, ...]:
    if not path.is_file():
        return ()
    lines = (ln.split("#", 1)[0].strip() if path.name == "lexicon.txt" else ln.strip() for ln in path.read_text().splitlines())
    return tuple(ln for ln in lines if ln)


def load_corpus(path: str | Path | None = None) -> Corpus:
    """Read and validate a corpus directory (or its ``pairs.jsonl``)."""
    pairs_file, root = _resolve(path if path is not None else default_corpus_dir())
    if not pairs_file.is_file():
        raise CorpusError(f"corpus file not found: {pairs_file}")
    pairs = []
    for lineno, line in enumerate(pairs_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(
                PromptPair(int(rec["id"]), rec["condition"], rec["domain"], rec["clean"], rec["corrupted"])
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{pairs_file}:{lineno}: cannot parse record ({exc})") from exc
    corpus = Corpus(
        tuple(sorted(pairs, key=lambda p: (p.id, CONDITIONS.index(p.condition) if p.condition in CONDITIONS else 2))),
        _read_lines(root / "neutral.txt"),
        _read_lines(root / "lexicon.txt"),
    )
    validate(corpus)
    return corpus


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ordered = sorted(corpus.pairs, key=lambda p: (p.id, CONDITIONS.index(p.condition)))
    (directory / "pairs.jsonl").write_text("".join(json.dumps(p.to_record()) + "\n" for p in ordered))
    (directory / "neutral.txt").write_text("".join(t + "\n" for t in corpus.neutral_prompts))
    if corpus.lexicon:
        (directory / "lexicon.txt").write_text("".join(w + "\n" for w in corpus.lexicon))
    return directory


def align_by_id(corpus: Corpus) -> list[tuple[PromptPair, PromptPair]]:
    """(good_news, negative_control) tuples sharing a corrupted baseline, in id order."""
    good = {p.id: p for p in corpus.condition("good_news")}
    neg = {p.id: p for p in corpus.condition("negative_control")}
    return [(good[i], neg[i]) for i in sorted(good)]
