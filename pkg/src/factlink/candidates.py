"""Alias prior tables P(e|m) and top-n candidate generation."""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, ValidationError

DEFAULT_N_CANDIDATES = 30

_WS = re.compile(r"\s+")


def normalize_alias(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


class PemTable:
    """Normalized alias -> entities with priors, sorted by prior (desc) then id."""

    def __init__(self, rows: Mapping[str, Sequence[tuple[int, float]]]):
        self._rows = {a: tuple(r) for a, r in rows.items()}

    def __contains__(self, alias: str) -> bool:
        return normalize_alias(alias) in self._rows

    def __getitem__(self, alias: str) -> tuple[tuple[int, float], ...]:
        return self._rows[normalize_alias(alias)]

    def get(self, alias: str, default=()):
        return self._rows.get(normalize_alias(alias), default)

    def __len__(self):
        return len(self._rows)

    def aliases(self) -> list[str]:
        return sorted(self._rows)

    def __eq__(self, other):
        return isinstance(other, PemTable) and self._rows == other._rows


def build_pem(alias_counts: Iterable[tuple[str, int, int]]) -> PemTable:
    totals: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for alias, eid, count in alias_counts:
        if count < 1:
            raise ValidationError(f"count for ({alias!r}, {eid}) must be >= 1, got {count}")
        totals[normalize_alias(alias)][int(eid)] += int(count)
    rows = {}
    for alias, per_entity in totals.items():
        z = sum(per_entity.values())
        ranked = sorted(per_entity.items(), key=lambda kv: (-kv[1], kv[0]))
        rows[alias] = [(e, c / z) for e, c in ranked]
    return PemTable(rows)


def read_alias_counts(path) -> list[tuple[str, int, int]]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(path, line_no, "expected alias, entity_id, count")
            try:
                out.append((cols[0], int(cols[1]), int(cols[2])))
            except ValueError:
                raise ParseError(path, line_no, "entity_id and count must be integers") from None
    return out


def write_alias_counts(rows: Iterable[tuple[str, int, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for alias, eid, count in rows:
            fh.write(f"{alias}\t{eid}\t{count}\n")


def load_pem(path) -> PemTable:
    return build_pem(read_alias_counts(path))


@dataclass(frozen=True)
class CandidateSet:
    mention_index: int
    candidates: tuple[tuple[int, float], ...]
    gold_present: bool = False

    @property
    def entity_ids(self) -> list[int]:
        return [e for e, _ in self.candidates]

    @property
    def priors(self) -> list[float]:
        return [p for _, p in self.candidates]

    def __len__(self):
        return len(self.candidates)


def candidates_for(
    pem: PemTable,
    mention_text: str,
    n: int = DEFAULT_N_CANDIDATES,
    mention_index: int = 0,
    gold: int | None = None,
) -> CandidateSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    cands = tuple(pem.get(mention_text)[:n])
    present = gold is not None and any(e == gold for e, _ in cands)
    return CandidateSet(mention_index, cands, present)


def document_candidates(pem: PemTable, document, n: int = DEFAULT_N_CANDIDATES) -> list[CandidateSet]:
    return [
        candidates_for(pem, m.surface, n, mention_index=i, gold=m.gold)
        for i, m in enumerate(document.mentions)
    ]


def candidate_recall(pem: PemTable, dataset, n: int | None = DEFAULT_N_CANDIDATES) -> float:
    """Percentage of gold-labelled mentions whose gold is among the top-n candidates.

    ``n=None`` uses every candidate in the table.
    """
    hit = total = 0
    for doc in dataset:
        for m in doc.mentions:
            if m.gold is None:
                continue
            total += 1
            row = pem.get(m.surface)
            if n is not None:
                row = row[:n]
            hit += any(e == m.gold for e, _ in row)
    if total == 0:
        raise ValidationError("candidate recall is undefined on a dataset with no gold mentions")
    return 100.0 * hit / total
