"""Valence flip test over id-aligned good-news / negative-control pairs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class FlipRecord:
    pair_id: int
    gap_good_news: float
    gap_negative_control: float

    @property
    def flipped(self) -> bool:
        # strict on both sides: a zero gap never counts as a flip
        return self.gap_good_news > 0 and self.gap_negative_control < 0

    def to_record(self) -> dict:
        return {**asdict(self), "flipped": self.flipped}


def flip_records(good_gaps: Mapping[int, float], negative_gaps: Mapping[int, float]) -> list[FlipRecord]:
    """Pair gaps by prompt id; ids present in only one condition are an error."""
    if set(good_gaps) != set(negative_gaps):
        missing = sorted(set(good_gaps) ^ set(negative_gaps))
        raise ValueError(f"gap ids do not align across conditions: {missing[:10]}")
    return [FlipRecord(i, good_gaps[i], negative_gaps[i]) for i in sorted(good_gaps)]


def flip_rate(records: Sequence[FlipRecord]) -> float:
    if not records:
        raise ValueError("flip_rate needs at least one record")
    return sum(r.flipped for r in records) / len(records)
