"""Glue between files on disk, generated worlds and model artifacts."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .candidates import DEFAULT_N_CANDIDATES, PemTable, build_pem, document_candidates, load_pem
from .corpus import Document, Vocab, read_documents
from .kb import (KnowledgeBase, build_fact_index, build_relation_vocab, load_kb, read_type_vocab,
                 select_type_vocab, write_type_vocab)
from .model import KBArtifacts

DEFAULT_TYPE_BUDGET = 1400
SPLITS = ("train", "dev", "test")


def type_examples(pem: PemTable, documents: Sequence[Document], n: int = DEFAULT_N_CANDIDATES):
    """(gold, negatives) pairs from training mentions whose gold is a candidate."""
    out = []
    for doc in documents:
        for cs in document_candidates(pem, doc, n):
            gold = doc.mentions[cs.mention_index].gold
            if cs.gold_present:
                out.append((gold, [e for e in cs.entity_ids if e != gold]))
    return out


def make_artifacts(kb: KnowledgeBase, pem: PemTable, vocab: Vocab, train_docs: Sequence[Document],
                   max_relations: int = 128, type_budget: int = DEFAULT_TYPE_BUDGET, type_vocab=None,
                   n_candidates: int = DEFAULT_N_CANDIDATES) -> KBArtifacts:
    rvocab = build_relation_vocab(kb, max_relations)
    if type_vocab is None:
        type_vocab = select_type_vocab(kb, type_examples(pem, train_docs, n_candidates), type_budget)
    return KBArtifacts(kb, rvocab, type_vocab, build_fact_index(kb, rvocab), pem, vocab)


def artifacts_from_world(world, **kw) -> KBArtifacts:
    return make_artifacts(world.kb, build_pem(world.alias_counts), world.vocab, world.splits["train"], **kw)


def load_world_dir(path) -> dict:
    path = Path(path)
    kb = load_kb(path / "entities.tsv", path / "facts.tsv")
    data = {
        "kb": kb,
        "pem": load_pem(path / "pem.tsv"),
        "vocab": Vocab.read(path / "vocab.tsv"),
        "manifest": json.loads((path / "manifest.json").read_text()) if (path / "manifest.json").exists() else {},
    }
    for split in SPLITS:
        f = path / f"{split}.jsonl"
        data[split] = read_documents(f) if f.exists() else []
    tv = path / "types.tsv"
    data["type_vocab"] = read_type_vocab(kb, tv) if tv.exists() else None
    return data


def load_artifacts(path, max_relations: int = 128, type_budget: int = DEFAULT_TYPE_BUDGET,
                   write_types: bool = False) -> tuple[KBArtifacts, dict]:
    """Artifacts for a world directory; the type vocabulary is cached in ``types.tsv``."""
    data = load_world_dir(path)
    art = make_artifacts(data["kb"], data["pem"], data["vocab"], data["train"], max_relations,
                         type_budget, data["type_vocab"])
    if write_types and data["type_vocab"] is None:
        write_type_vocab(art.kb, art.type_vocab, Path(path) / "types.tsv")
    return art, data


def fact_dependent_keys(manifest: dict, split: str) -> set[tuple[str, int]]:
    return {(d, int(m)) for d, m in manifest.get("fact_dependent", {}).get(split, [])}
