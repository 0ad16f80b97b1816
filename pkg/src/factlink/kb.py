"""Knowledge base loading, relation/type vocabularies and the sparse fact index."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import IntegrityError, ParseError

INSTANCE_OF = "instance_of"
SUBCLASS_OF = "subclass_of"
TYPE_RELATIONS = ("instance_of", "occupation", "country", "sport")

OTHER = "OTHER"
SAME_AS = "SAME_AS"


class Fact(NamedTuple):
    subject: int
    relation: int
    object: int


@dataclass(frozen=True)
class Entity:
    id: int
    label: str
    description: str = ""
    raw_types: frozenset = frozenset()


class KnowledgeBase:
    """Entities, deduplicated directed facts and relation names.

    ``relation_names[rid]`` is the surface name of relation ``rid``.  Facts
    are stored once each, in first-seen order.
    """

    def __init__(
        self,
        labels: Sequence[str],
        facts: Iterable[tuple[int, int, int]],
        relation_names: Sequence[str],
        descriptions: Sequence[str] | None = None,
    ):
        n = len(labels)
        self.relation_names: tuple[str, ...] = tuple(relation_names)
        self._relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        if len(self._relation_ids) != len(self.relation_names):
            raise IntegrityError("duplicate relation names")
        seen: dict[Fact, None] = {}
        for s, r, o in facts:
            for eid in (s, o):
                if not 0 <= eid < n:
                    raise IntegrityError(f"fact references unknown entity id {eid}")
            if not 0 <= r < len(self.relation_names):
                raise IntegrityError(f"fact references unknown relation id {r}")
            seen.setdefault(Fact(int(s), int(r), int(o)), None)
        self.facts: tuple[Fact, ...] = tuple(seen)

        descriptions = descriptions if descriptions is not None else [""] * n
        type_rids = {self._relation_ids[r] for r in TYPE_RELATIONS if r in self._relation_ids}
        raw: list[set] = [set() for _ in range(n)]
        for f in self.facts:
            if f.relation in type_rids:
                raw[f.subject].add((f.relation, f.object))
        ents = []
        for i, label in enumerate(labels):
            if not label:
                raise IntegrityError(f"entity {i} has an empty label")
            ents.append(Entity(i, label, descriptions[i] or "", frozenset(raw[i])))
        self.entities: tuple[Entity, ...] = tuple(ents)
        self._expanded = self._infer_types()

    @classmethod
    def from_named(cls, labels, triples, descriptions=None, relations: Sequence[str] = ()):
        """Build from ``(subject, relation_name, object)`` triples."""
        names = list(relations)
        index = {n: i for i, n in enumerate(names)}
        facts = []
        for s, rname, o in triples:
            if rname not in index:
                index[rname] = len(names)
                names.append(rname)
            facts.append((s, index[rname], o))
        return cls(labels, facts, names, descriptions)

    def __len__(self):
        return len(self.entities)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def relation_id(self, name: str) -> int | None:
        return self._relation_ids.get(name)

    def relation_counts(self) -> Counter:
        return Counter(f.relation for f in self.facts)

    def expanded_types(self, e: int) -> frozenset:
        """Raw types plus ``instance_of`` ancestors reached through ``subclass_of``."""
        return self._expanded[e]

    def _infer_types(self) -> tuple[frozenset, ...]:
        inst = self.relation_id(INSTANCE_OF)
        sub = self.relation_id(SUBCLASS_OF)
        parents: dict[int, set[int]] = {}
        if sub is not None:
            for f in self.facts:
                if f.relation == sub:
                    parents.setdefault(f.subject, set()).add(f.object)
        memo: dict[int, frozenset] = {}

        def ancestors(c: int) -> frozenset:
            if c in memo:
                return memo[c]
            out: set[int] = set()
            stack = list(parents.get(c, ()))
            while stack:
                p = stack.pop()
                if p in out:
                    continue
                out.add(p)
                stack.extend(parents.get(p, ()))
            out.discard(c)
            memo[c] = frozenset(out)
            return memo[c]

        expanded = []
        for ent in self.entities:
            types = set(ent.raw_types)
            if inst is not None:
                for r, c in ent.raw_types:
                    if r == inst:
                        types.update((inst, a) for a in ancestors(c))
            expanded.append(frozenset(types))
        return tuple(expanded)


def _read_tsv(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            yield line_no, line.split("\t")


def _parse_int(path, line_no, text, what):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, line_no, f"{what} {text!r} is not an integer") from None


def load_kb(entity_file, fact_file) -> KnowledgeBase:
    entity_file, fact_file = Path(entity_file), Path(fact_file)
    rows: dict[int, tuple[str, str]] = {}
    for line_no, cols in _read_tsv(entity_file):
        if len(cols) not in (2, 3):
            raise ParseError(entity_file, line_no, f"expected 3 tab-separated columns, got {len(cols)}")
        eid = _parse_int(entity_file, line_no, cols[0], "entity id")
        label = cols[1]
        if not label:
            raise ParseError(entity_file, line_no, "empty label")
        if eid in rows:
            raise ParseError(entity_file, line_no, f"duplicate entity id {eid}")
        rows[eid] = (label, cols[2] if len(cols) == 3 else "")
    n = len(rows)
    missing = sorted(set(range(n)) - set(rows))
    if missing:
        raise IntegrityError(f"entity ids are not contiguous from 0; first gap at {missing[0]}")

    names: list[str] = []
    index: dict[str, int] = {}
    facts = []
    for line_no, cols in _read_tsv(fact_file):
        if len(cols) != 3:
            raise ParseError(fact_file, line_no, f"expected 3 tab-separated columns, got {len(cols)}")
        s = _parse_int(fact_file, line_no, cols[0], "subject id")
        o = _parse_int(fact_file, line_no, cols[2], "object id")
        rname = cols[1]
        if not rname:
            raise ParseError(fact_file, line_no, "empty relation name")
        for eid in (s, o):
            if eid not in rows:
                raise IntegrityError(f"{fact_file}:{line_no}: unknown entity id {eid}")
        if rname not in index:
            index[rname] = len(names)
            names.append(rname)
        facts.append((s, index[rname], o))
    labels = [rows[i][0] for i in range(n)]
    descs = [rows[i][1] for i in range(n)]
    return KnowledgeBase(labels, facts, names, descs)


def write_kb(kb: KnowledgeBase, entity_file, fact_file) -> None:
    with open(entity_file, "w", encoding="utf-8", newline="") as fh:
        for e in kb.entities:
            fh.write(f"{e.id}\t{e.label}\t{e.description}\n")
    with open(fact_file, "w", encoding="utf-8", newline="") as fh:
        for f in kb.facts:
            fh.write(f"{f.subject}\t{kb.relation_names[f.relation]}\t{f.object}\n")


# ---------------------------------------------------------------- relations


@dataclass(frozen=True)
class RelationVocab:
    standard: tuple[int, ...]
    other_class_index: int
    same_as_index: int
    _class_of: Mapping[int, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.standard) + 2

    def class_of(self, relation_id: int) -> int:
        return self._class_of.get(relation_id, self.other_class_index)

    def class_names(self, kb: KnowledgeBase) -> list[str]:
        return [kb.relation_names[r] for r in self.standard] + [OTHER, SAME_AS]


def build_relation_vocab(kb: KnowledgeBase, max_standard: int = 128) -> RelationVocab:
    if max_standard < 0:
        raise ValueError("max_standard must be >= 0")
    counts = kb.relation_counts()
    ranked = sorted(counts, key=lambda r: (-counts[r], r))[:max_standard]
    k = len(ranked)
    return RelationVocab(
        standard=tuple(ranked),
        other_class_index=k,
        same_as_index=k + 1,
        _class_of=MappingProxyType({r: i for i, r in enumerate(ranked)}),
    )


class SparseFactIndex:
    """Read-only map from an ordered entity pair to its relation-class bitmask.

    Bitmasks are Python ints with bit ``c`` set for relation class ``c``.
    The SAME_AS bit is never stored; it is added at lookup when ``s == o``.
    """

    def __init__(self, kb: KnowledgeBase, vocab: RelationVocab):
        self.vocab = vocab
        self.n_entities = kb.n_entities
        pairs: dict[tuple[int, int], int] = {}
        by_subject: dict[int, dict[int, int]] = {}
        for f in kb.facts:
            bit = 1 << vocab.class_of(f.relation)
            key = (f.subject, f.object)
            pairs[key] = pairs.get(key, 0) | bit
        for (s, o), m in pairs.items():
            by_subject.setdefault(s, {})[o] = m
        self.pair_map: Mapping[tuple[int, int], int] = MappingProxyType(pairs)
        self._by_subject = MappingProxyType({s: MappingProxyType(d) for s, d in by_subject.items()})

    def __len__(self):
        return len(self.pair_map)

    @property
    def size(self) -> int:
        return self.vocab.size

    def _check(self, e: int):
        if not 0 <= e < self.n_entities:
            raise IndexError(f"entity id {e} out of range [0, {self.n_entities})")

    def mask(self, s: int, o: int) -> int:
        self._check(s)
        self._check(o)
        m = self.pair_map.get((s, o), 0)
        if s == o:
            m |= 1 << self.vocab.same_as_index
        return m

    def lookup(self, s: int, o: int) -> np.ndarray:
        return mask_to_bits(self.mask(s, o), self.vocab.size)

    def objects_of(self, s: int) -> Mapping[int, int]:
        """Stored (non-synthetic) masks for every object of subject ``s``."""
        return self._by_subject.get(s, MappingProxyType({}))


def build_fact_index(kb: KnowledgeBase, vocab: RelationVocab) -> SparseFactIndex:
    return SparseFactIndex(kb, vocab)


def lookup_relations(index: SparseFactIndex, s: int, o: int) -> np.ndarray:
    return index.lookup(s, o)


def mask_to_bits(mask: int, size: int) -> np.ndarray:
    return np.array([(mask >> c) & 1 for c in range(size)], dtype=np.uint8)


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class TypeVocab:
    types: tuple[tuple[int, int], ...] = ()

    def __len__(self):
        return len(self.types)

    def __post_init__(self):
        if len(set(self.types)) != len(self.types):
            raise IntegrityError("duplicate type in TypeVocab")


def type_pool(kb: KnowledgeBase, entity_ids: Iterable[int]) -> list[tuple[int, int]]:
    allowed = {kb.relation_id(r) for r in TYPE_RELATIONS} - {None}
    pool = set()
    for e in entity_ids:
        pool.update(t for t in kb.expanded_types(e) if t[0] in allowed)
    return sorted(pool)


def select_type_vocab(
    kb: KnowledgeBase,
    examples: Sequence[tuple[int, Iterable[int]]],
    budget: int,
) -> TypeVocab:
    """Greedy type selection under an oracle type classifier.

    Each step adds the pool type that newly separates the most examples; an
    example counts as separated once its gold entity's restricted type vector
    differs from every negative's.  Ties go to the earlier type in pool order.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    cleaned = []
    for gold, negs in examples:
        negs = sorted(set(negs) - {gold})
        if negs:
            cleaned.append((gold, negs))
    if budget == 0 or not cleaned:
        return TypeVocab(())
    ents = sorted({g for g, _ in cleaned} | {n for _, ns in cleaned for n in ns})
    pool = type_pool(kb, ents)
    if not pool:
        return TypeVocab(())
    col = {e: i for i, e in enumerate(ents)}
    member = np.zeros((len(ents), len(pool)), dtype=bool)
    pidx = {t: j for j, t in enumerate(pool)}
    for e in ents:
        for t in kb.expanded_types(e):
            j = pidx.get(t)
            if j is not None:
                member[col[e], j] = True

    # differs[x, n, t]: gold of example x and its n-th negative disagree on type t
    width = max(len(ns) for _, ns in cleaned)
    differs = np.zeros((len(cleaned), width, len(pool)), dtype=bool)
    valid = np.zeros((len(cleaned), width), dtype=bool)
    for x, (g, ns) in enumerate(cleaned):
        for k, n in enumerate(ns):
            differs[x, k] = member[col[g]] != member[col[n]]
            valid[x, k] = True

    chosen: list[int] = []
    split = np.zeros((len(cleaned), width), dtype=bool)  # pair already distinguished
    separated = np.zeros(len(cleaned), dtype=bool)
    while len(chosen) < budget:
        trial = split[:, :, None] | differs  # [x, n, t]
        full = np.all(trial | ~valid[:, :, None], axis=1)  # [x, t]
        gain = (full & ~separated[:, None]).sum(axis=0)
        gain[chosen] = -1
        best = int(np.argmax(gain))
        if gain[best] <= 0:
            break
        chosen.append(best)
        split |= differs[:, :, best]
        separated = np.all(split | ~valid, axis=1)
    return TypeVocab(tuple(pool[j] for j in chosen))


def entity_types(kb: KnowledgeBase, vocab: TypeVocab, e: int) -> np.ndarray:
    if not 0 <= e < kb.n_entities:
        raise IndexError(f"entity id {e} out of range [0, {kb.n_entities})")
    have = kb.expanded_types(e)
    return np.array([t in have for t in vocab.types], dtype=np.uint8)


def type_matrix(kb: KnowledgeBase, vocab: TypeVocab) -> np.ndarray:
    out = np.zeros((kb.n_entities, len(vocab)), dtype=np.uint8)
    col = {t: j for j, t in enumerate(vocab.types)}
    for e in range(kb.n_entities):
        for t in kb.expanded_types(e):
            j = col.get(t)
            if j is not None:
                out[e, j] = 1
    return out


def write_type_vocab(kb: KnowledgeBase, vocab: TypeVocab, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for rank, (r, o) in enumerate(vocab.types):
            fh.write(f"{rank}\t{kb.relation_names[r]}\t{o}\n")


def read_type_vocab(kb: KnowledgeBase, path) -> TypeVocab:
    path = Path(path)
    rows = []
    for line_no, cols in _read_tsv(path):
        if len(cols) != 3:
            raise ParseError(path, line_no, "expected rank, relation_name, object_id")
        rank = _parse_int(path, line_no, cols[0], "rank")
        rid = kb.relation_id(cols[1])
        if rid is None:
            raise IntegrityError(f"{path}:{line_no}: unknown relation {cols[1]!r}")
        oid = _parse_int(path, line_no, cols[2], "object id")
        if not 0 <= oid < kb.n_entities:
            raise IntegrityError(f"{path}:{line_no}: unknown entity id {oid}")
        rows.append((rank, (rid, oid)))
    rows.sort()
    return TypeVocab(tuple(t for _, t in rows))
