"""Synthetic worlds: a KB, alias statistics and documents with known answers.

Alias groups of ``ambiguity`` entities share a surface form.  The first
member of each group is the popular one.  A *fact-dependent* mention names a
less popular member of a group whose members share label, type and
description, so the only way to recover it is a KB link to another mention
in the same document: a relational fact expressed by a cue phrase
(``dependence_mode="fact"``), or a second, unambiguous mention of the same
entity (``dependence_mode="coref"``).  Competing candidates are never linked
to anything else in the document.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .candidates import build_pem, write_alias_counts
from .corpus import Document, Mention, Vocab, write_documents
from .errors import ValidationError
from .kb import INSTANCE_OF, SUBCLASS_OF, KnowledgeBase, write_kb

SPLITS = ("train", "dev", "test")
_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class WorldSpec:
    n_entities: int = 240
    n_relations: int = 8
    n_types: int = 12
    aliases_per_entity: int = 2
    ambiguity: int = 2
    facts_per_entity: int = 2
    n_documents: int = 300
    mentions_per_document: int = 6
    fact_dependence_rate: float = 0.5
    seed: int = 0
    dependence_mode: str = "fact"
    gold_coverage: float = 1.0
    twin_fraction: float = 0.5
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self):
        for name in ("n_entities", "n_relations", "n_types", "aliases_per_entity", "ambiguity",
                     "n_documents", "mentions_per_document"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.facts_per_entity < 0:
            raise ValidationError("facts_per_entity must be >= 0")
        if self.ambiguity > self.n_entities:
            raise ValidationError(f"ambiguity {self.ambiguity} exceeds n_entities {self.n_entities}")
        if not 0.0 <= self.fact_dependence_rate <= 1.0:
            raise ValidationError("fact_dependence_rate must lie in [0, 1]")
        if self.fact_dependence_rate > 0 and self.ambiguity < 2:
            raise ValidationError("fact-dependent mentions need ambiguity >= 2")
        if self.dependence_mode not in ("fact", "coref"):
            raise ValidationError(f"unknown dependence_mode {self.dependence_mode!r}")
        if self.dependence_mode == "coref" and self.aliases_per_entity < 2:
            raise ValidationError("coref worlds need aliases_per_entity >= 2")
        if self.dependence_mode == "fact" and self.fact_dependence_rate > 0 and self.mentions_per_document < 2:
            raise ValidationError("fact-dependent mentions need at least two mentions per document")
        if not 0.0 <= self.gold_coverage <= 1.0:
            raise ValidationError("gold_coverage must lie in [0, 1]")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValidationError("split must be three non-negative fractions summing to 1")


@dataclass
class World:
    spec: WorldSpec
    kb: KnowledgeBase
    alias_counts: list[tuple[str, int, int]]
    vocab: Vocab
    splits: dict[str, list[Document]]
    manifest: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_kb(self.kb, out / "entities.tsv", out / "facts.tsv")
        write_alias_counts(self.alias_counts, out / "pem.tsv")
        self.vocab.write(out / "vocab.tsv")
        for name, docs in self.splits.items():
            write_documents(docs, out / f"{name}.jsonl")
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return out


class _Words:
    def __init__(self, rng):
        self.rng = rng
        self.used: set[str] = set()
        self.order: list[str] = []

    def new(self, syllables: int = 3) -> str:
        while True:
            w = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS))
                        for _ in range(syllables))
            if w not in self.used:
                self.used.add(w)
                self.order.append(w)
                return w

    def add(self, w: str) -> str:
        if w not in self.used:
            self.used.add(w)
            self.order.append(w)
        return w


@dataclass
class _Slot:
    """One planned mention before tokens are laid out."""
    gold: int
    surface: str
    dependent: bool
    partner: int | None = None  # index of the linked slot, if any
    coref_unit: bool = False
    covered: bool = True


def generate_world(spec: WorldSpec, out_dir=None) -> World:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = _Words(rng)
    words.add(".")

    # type classes with a subclass hierarchy
    labels: list[str] = []
    descs: list[str] = []
    triples: list[tuple[int, str, int]] = []
    n_roots = max(1, spec.n_types // 4)
    for c in range(spec.n_types):
        labels.append(words.new(2))
        descs.append("")
        if c >= n_roots:
            triples.append((c, SUBCLASS_OF, int(rng.integers(0, c))))
    leaf_classes = list(range(n_roots, spec.n_types)) or list(range(spec.n_types))

    rel_names = [f"rel_{r:02d}" for r in range(spec.n_relations)]
    cues = {r: (words.new(2), words.new(2)) for r in rel_names}
    fillers = [words.new(2) for _ in range(16)]
    rare = [words.new(2) for _ in range(4)]

    # mentionable entities, grouped by shared alias
    first = spec.n_types
    ent_ids = np.arange(first, first + spec.n_entities)
    rng.shuffle(ent_ids)
    groups: list[list[int]] = [list(map(int, ent_ids[s:s + spec.ambiguity]))
                               for s in range(0, spec.n_entities, spec.ambiguity)]
    group_of: dict[int, int] = {}
    rank_of: dict[int, int] = {}
    twin_group: list[bool] = []
    entity_class: dict[int, int] = {}
    entity_desc: dict[int, str] = {}
    group_alias: list[str] = []
    alias_counts: list[tuple[str, int, int]] = []
    unique_alias: dict[int, list[str]] = {}
    labels.extend([""] * spec.n_entities)
    descs.extend([""] * spec.n_entities)

    for g, members in enumerate(groups):
        alias = words.new(3)
        group_alias.append(alias)
        twin = len(members) > 1 and bool(rng.random() < spec.twin_fraction)
        twin_group.append(twin)
        if twin:
            cls = int(rng.choice(leaf_classes))
            shared = f"{labels[cls]} {words.new(2)} {words.new(2)}"
        top = int(rng.integers(60, 91))
        for r, e in enumerate(members):
            group_of[e], rank_of[e] = g, r
            if not twin:
                cls = int(rng.choice(leaf_classes))
                shared = f"{labels[cls]} {words.new(2)} {words.new(2)}"
            entity_class[e] = cls
            entity_desc[e] = shared
            labels[e] = alias
            descs[e] = shared
            count = top if r == 0 else int(rng.integers(1, min(top, 100 - top + 1)))
            alias_counts.append((alias, e, count))
            unique_alias[e] = []
            for _ in range(spec.aliases_per_entity - 1):
                ua = f"{words.new(2)} {alias}"
                unique_alias[e].append(ua)
                alias_counts.append((ua, e, int(rng.integers(5, 20))))
            triples.append((e, INSTANCE_OF, cls))

    relational: list[tuple[int, str, int]] = []
    mentionable = [int(e) for e in range(first, first + spec.n_entities)]
    for e in mentionable:
        for _ in range(spec.facts_per_entity):
            o = int(rng.choice(mentionable))
            if o == e:
                continue
            relational.append((e, rel_names[int(rng.integers(0, spec.n_relations))], o))
    triples.extend(relational)
    kb = KnowledgeBase.from_named(labels, triples, descs,
                                  relations=[INSTANCE_OF, SUBCLASS_OF, *rel_names])

    links: dict[int, set[int]] = {}
    for s, _, o in relational:
        links.setdefault(s, set()).add(o)
        links.setdefault(o, set()).add(s)
    rel_by_pair: dict[tuple[int, int], list[str]] = {}
    for s, r, o in relational:
        rel_by_pair.setdefault((s, o), []).append(r)

    def role(e: int) -> str:
        if rank_of[e] == 0:
            return "top"
        return "dep" if twin_group[group_of[e]] else "none"

    by_roles: dict[tuple[str, str], list[tuple[int, str, int]]] = {}
    for s, r, o in relational:
        by_roles.setdefault((role(s), role(o)), []).append((s, r, o))
    dep_entities = [e for e in mentionable if role(e) == "dep"]
    top_entities = [e for e in mentionable if role(e) == "top"]

    def candidates_of(slot: _Slot) -> list[int]:
        if slot.surface in group_alias_set:
            return groups[group_of[slot.gold]]
        return [slot.gold]

    group_alias_set = set(group_alias)

    def valid(slots: list[_Slot]) -> bool:
        cands = [candidates_of(s) for s in slots]
        ambiguous_groups = [group_of[s.gold] for s in slots if s.surface in group_alias_set]
        if len(set(ambiguous_groups)) != len(ambiguous_groups):
            return False
        for x, s in enumerate(slots):
            others = set()
            for y, c in enumerate(cands):
                if y != x:
                    others.update(c)
            # competitors must be isolated from the rest of the document
            for comp in cands[x]:
                if comp == s.gold:
                    continue
                if comp in others or links.get(comp, set()) & others:
                    return False
            if spec.dependence_mode == "fact" and s.gold in others:
                return False
            if s.dependent and spec.dependence_mode == "coref":
                partner_ents = set(cands[s.partner])
                if links.get(s.gold, set()) & (others - partner_ents):
                    return False
                if links.get(s.gold, set()) & partner_ents:
                    return False
        return True

    def plan_document() -> list[_Slot] | None:
        slots: list[_Slot] = []
        left = spec.mentions_per_document
        while left > 0:
            if spec.dependence_mode == "coref" and left >= 2 and rng.random() < spec.fact_dependence_rate:
                if not dep_entities:
                    return None
                b = int(rng.choice(dep_entities))
                x = len(slots)
                slots.append(_Slot(b, group_alias[group_of[b]], True, partner=x + 1, coref_unit=True))
                slots.append(_Slot(b, str(rng.choice(unique_alias[b])), False, partner=x, coref_unit=True))
                left -= 2
            elif left >= 2:
                if spec.dependence_mode == "fact":
                    ds = bool(rng.random() < spec.fact_dependence_rate)
                    do = bool(rng.random() < spec.fact_dependence_rate)
                else:
                    ds = do = False
                pool = by_roles.get(("dep" if ds else "top", "dep" if do else "top"), [])
                if not pool:
                    return None
                s, r, o = pool[int(rng.integers(0, len(pool)))]
                x = len(slots)
                slots.append(_Slot(s, group_alias[group_of[s]], ds, partner=x + 1))
                slots.append(_Slot(o, group_alias[group_of[o]], do, partner=x))
                left -= 2
            else:
                e = int(rng.choice(top_entities))
                slots.append(_Slot(e, group_alias[group_of[e]], False))
                left -= 1
        return slots

    planned: list[list[_Slot]] = []
    for _ in range(spec.n_documents):
        for _attempt in range(500):
            slots = plan_document()
            if slots is not None and valid(slots):
                planned.append(slots)
                break
        else:
            raise ValidationError("could not place a document under the isolation constraints; "
                                  "lower facts_per_entity or raise n_entities")

    n_train = int(round(spec.split[0] * spec.n_documents))
    n_dev = int(round(spec.split[1] * spec.n_documents))
    bounds = {"train": (0, n_train), "dev": (n_train, n_train + n_dev),
              "test": (n_train + n_dev, spec.n_documents)}

    # exact gold coverage per split: drop candidates of eligible independent mentions
    for name, (lo, hi) in bounds.items():
        eligible = []
        total = 0
        for d in range(lo, hi):
            slots = planned[d]
            total += len(slots)
            for x, s in enumerate(slots):
                if s.dependent or s.coref_unit:
                    continue
                if s.partner is not None and slots[s.partner].dependent:
                    continue
                eligible.append((d, x))
        n_drop = int(round((1.0 - spec.gold_coverage) * total))
        if n_drop > len(eligible):
            raise ValidationError(f"{name}: cannot reach gold_coverage={spec.gold_coverage}")
        if n_drop:
            for pick in sorted(rng.choice(len(eligible), size=n_drop, replace=False).tolist()):
                d, x = eligible[pick]
                s = planned[d][x]
                s.covered = False
                s.surface = f"{group_alias[group_of[s.gold]]} {rare[int(rng.integers(0, len(rare)))]}"

    vocab = Vocab(words.order)
    splits: dict[str, list[Document]] = {n: [] for n in SPLITS}
    dependent_index: dict[str, list[list]] = {n: [] for n in SPLITS}
    for name, (lo, hi) in bounds.items():
        for d in range(lo, hi):
            doc, dep = _realize(f"{name}-{d - lo:04d}", planned[d], rng, vocab, fillers, cues, rel_by_pair)
            splits[name].append(doc)
            dependent_index[name].extend([doc.id, m] for m in dep)

    pem = build_pem(alias_counts)
    manifest = {
        "spec": asdict(spec),
        "n_kb_entities": kb.n_entities,
        "n_facts": len(kb.facts),
        "relations": list(kb.relation_names),
        "fact_dependent": dependent_index,
        "documents": {n: len(v) for n, v in splits.items()},
        "mentions": {n: sum(len(d.mentions) for d in v) for n, v in splits.items()},
    }
    for name, docs in splits.items():
        manifest.setdefault("prior_only_accuracy", {})[name] = _prior_accuracy(pem, docs)
    world = World(spec, kb, alias_counts, vocab, splits, manifest)
    if out_dir is not None:
        world.write(out_dir)
    return world


def _prior_accuracy(pem, docs) -> float:
    hit = total = 0
    for d in docs:
        for m in d.mentions:
            total += 1
            row = pem.get(m.surface)
            hit += bool(row) and row[0][0] == m.gold
    return hit / total if total else 0.0


def _realize(doc_id, slots, rng, vocab, fillers, cues, rel_by_pair):
    sentences: list[list[tuple[str, int | None]]] = []  # (word, slot index or None)
    done = set()
    for x, s in enumerate(slots):
        if x in done:
            continue
        if s.partner is not None and not s.coref_unit:
            o = slots[s.partner]
            r = rel_by_pair[(s.gold, o.gold)][0]
            sent = [(w, x) for w in s.surface.split()]
            sent += [(w, None) for w in cues[r]]
            sent += [(w, s.partner) for w in o.surface.split()]
            sent.append((".", None))
            sentences.append(sent)
            done.update((x, s.partner))
        else:
            f = rng.choice(len(fillers), size=2, replace=False)
            sentences.append([(w, x) for w in s.surface.split()]
                             + [(fillers[f[0]], None), (fillers[f[1]], None), (".", None)])
            done.add(x)
    order = rng.permutation(len(sentences))
    tokens: list[int] = []
    spans: dict[int, list[int]] = {}
    for si in order:
        for w, slot in sentences[si]:
            if slot is not None:
                spans.setdefault(slot, []).append(len(tokens))
            tokens.append(vocab.index[w])
    by_start = sorted(spans, key=lambda x: spans[x][0])
    mentions = []
    dependent = []
    for pos, x in enumerate(by_start):
        s = slots[x]
        mentions.append(Mention(spans[x][0], spans[x][-1] + 1, s.surface, s.gold))
        if s.dependent:
            dependent.append(pos)
    return Document(doc_id, tuple(tokens), tuple(mentions)), dependent
