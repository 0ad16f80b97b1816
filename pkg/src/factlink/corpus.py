"""Documents, mentions and the closed token vocabulary, with their file formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IntegrityError, ParseError, SpanError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    surface: str
    gold: int | None = None

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[int, ...]
    mentions: tuple[Mention, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "mentions", tuple(self.mentions))
        prev_end = 0
        for m in sorted(self.mentions, key=lambda m: m.start):
            if not 0 <= m.start < m.end <= len(self.tokens):
                raise SpanError(f"doc {self.id}: mention span ({m.start}, {m.end}) out of bounds")
            if m.start < prev_end:
                raise SpanError(f"doc {self.id}: overlapping mention at ({m.start}, {m.end})")
            prev_end = m.end

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "mentions": [
                {"start": m.start, "end": m.end, "surface": m.surface, "gold": m.gold}
                for m in self.mentions
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Document":
        mentions = tuple(
            Mention(int(m["start"]), int(m["end"]), str(m["surface"]), m.get("gold"))
            for m in obj.get("mentions", ())
        )
        return cls(str(obj["id"]), tuple(obj["tokens"]), mentions)


def write_documents(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")


def read_documents(path) -> list[Document]:
    path = Path(path)
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(path, line_no, f"bad document record: {exc}") from None
    return docs


class Vocab:
    """Closed whitespace vocabulary; ids 0-3 are the special tokens."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise IntegrityError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def cls_id(self):
        return 2

    @property
    def sep_id(self):
        return 3

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, t in enumerate(self.tokens):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def read(cls, path) -> "Vocab":
        path = Path(path)
        rows = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 2:
                    raise ParseError(path, line_no, "expected token<TAB>id")
                try:
                    rows[int(cols[1])] = cols[0]
                except ValueError:
                    raise ParseError(path, line_no, "token id must be an integer") from None
        if sorted(rows) != list(range(len(rows))):
            raise IntegrityError(f"{path}: token ids are not contiguous from 0")
        return cls([rows[i] for i in range(len(rows))])
