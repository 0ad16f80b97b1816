import filecmp
import json
from dataclasses import replace

import pytest

from factlink.candidates import build_pem, candidate_recall, candidates_for, load_pem
from factlink.corpus import Vocab, read_documents
from factlink.errors import ValidationError
from factlink.kb import build_fact_index, build_relation_vocab, load_kb
from factlink.pipeline import fact_dependent_keys, load_world_dir
from factlink.world import SPLITS, WorldSpec, generate_world

from conftest import SMALL_SPEC


@pytest.mark.parametrize("change", [
    {"n_entities": 0}, {"ambiguity": 500}, {"fact_dependence_rate": 1.5}, {"ambiguity": 1},
    {"dependence_mode": "other"}, {"gold_coverage": -0.1}, {"split": (0.5, 0.5, 0.5)}, {"facts_per_entity": -1},
])
def test_inconsistent_specs_are_rejected(change):
    with pytest.raises(ValidationError):
        generate_world(replace(SMALL_SPEC, **change))


def test_regeneration_is_byte_identical(tmp_path):
    spec = replace(SMALL_SPEC, seed=7)
    generate_world(spec, tmp_path / "a")
    generate_world(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["dev.jsonl", "entities.tsv", "facts.tsv", "manifest.json", "pem.tsv", "test.jsonl",
                     "train.jsonl", "vocab.tsv"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    generate_world(replace(spec, seed=8), tmp_path / "c")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "c" / "train.jsonl").read_bytes()


def named_entities(kb):
    # relation ids follow first appearance in facts.tsv, so compare by name
    return [(e.id, e.label, e.description, sorted((kb.relation_names[r], o) for r, o in e.raw_types))
            for e in kb.entities]


def test_files_round_trip(tmp_path, small_world):
    small_world.write(tmp_path)
    kb = load_kb(tmp_path / "entities.tsv", tmp_path / "facts.tsv")
    assert named_entities(kb) == named_entities(small_world.kb)
    assert [(f.subject, kb.relation_names[f.relation], f.object) for f in kb.facts] == \
        [(f.subject, small_world.kb.relation_names[f.relation], f.object) for f in small_world.kb.facts]
    assert load_pem(tmp_path / "pem.tsv") == build_pem(small_world.alias_counts)
    assert Vocab.read(tmp_path / "vocab.tsv") == small_world.vocab
    for split in SPLITS:
        assert read_documents(tmp_path / f"{split}.jsonl") == small_world.splits[split]
    data = load_world_dir(tmp_path)
    assert data["manifest"] == json.loads(json.dumps(small_world.manifest))


def prior_misses(world, covered_only=True):
    pem = build_pem(world.alias_counts)
    out = {}
    for split, docs in world.splits.items():
        keys = set()
        for d in docs:
            for x, m in enumerate(d.mentions):
                cands = candidates_for(pem, m.surface, 30).entity_ids
                if covered_only and m.gold not in cands:
                    continue
                if not cands or cands[0] != m.gold:
                    keys.add((d.id, x))
        out[split] = keys
    return out


@pytest.mark.parametrize("mode", ["fact", "coref"])
def test_manifest_matches_prior_misses(mode):
    world = generate_world(replace(SMALL_SPEC, dependence_mode=mode, mentions_per_document=5))
    misses = prior_misses(world, covered_only=False)
    for split in SPLITS:
        assert fact_dependent_keys(world.manifest, split) == misses[split]
    assert sum(len(v) for v in misses.values()) > 0


def test_manifest_excludes_uncovered_mentions():
    world = generate_world(replace(SMALL_SPEC, gold_coverage=0.9, fact_dependence_rate=0.25))
    misses = prior_misses(world)
    for split in SPLITS:
        assert fact_dependent_keys(world.manifest, split) == misses[split]


def test_degenerate_rates():
    world = generate_world(replace(SMALL_SPEC, fact_dependence_rate=0.0))
    assert world.manifest["prior_only_accuracy"] == {s: 1.0 for s in SPLITS}
    assert all(not v for v in prior_misses(world).values())
    world = generate_world(replace(SMALL_SPEC, fact_dependence_rate=1.0, ambiguity=2))
    pem = build_pem(world.alias_counts)
    dependent = 0
    for split in SPLITS:
        keys = fact_dependent_keys(world.manifest, split)
        for d in world.splits[split]:
            for x, m in enumerate(d.mentions):
                if (d.id, x) in keys:
                    dependent += 1
                    assert candidates_for(pem, m.surface, 30).entity_ids[0] != m.gold
    assert dependent > 0


def test_dependent_mentions_need_a_fact_path():
    world = generate_world(replace(SMALL_SPEC, mentions_per_document=5))
    kb = world.kb
    index = build_fact_index(kb, build_relation_vocab(kb))
    pem = build_pem(world.alias_counts)
    for split in SPLITS:
        keys = fact_dependent_keys(world.manifest, split)
        for d in world.splits[split]:
            cands = [candidates_for(pem, m.surface, 30).entity_ids for m in d.mentions]
            for x, m in enumerate(d.mentions):
                if (d.id, x) not in keys:
                    continue
                g = m.gold
                others = [y for y in range(len(d.mentions)) if y != x]
                assert any(index.mask(g, d.mentions[y].gold) or index.mask(d.mentions[y].gold, g) for y in others)
                for c in cands[x]:
                    if c == g:
                        continue
                    # the competitor looks identical and touches nothing else in the document
                    assert kb.entities[c].label == kb.entities[g].label
                    assert kb.entities[c].description == kb.entities[g].description
                    assert kb.expanded_types(c) == kb.expanded_types(g)
                    for y in others:
                        for e in cands[y]:
                            assert index.mask(c, e) == 0 and index.mask(e, c) == 0


def test_coverage_is_exact():
    spec = replace(SMALL_SPEC, n_documents=50, mentions_per_document=4, gold_coverage=0.8, split=(0.6, 0.2, 0.2))
    world = generate_world(spec)
    pem = build_pem(world.alias_counts)
    assert sum(len(d.mentions) for d in world.splits["test"]) == 40
    assert candidate_recall(pem, world.splits["test"], 30) == 80.0


def test_default_world_shape():
    world = generate_world(WorldSpec())
    assert world.manifest["documents"] == {"train": 240, "dev": 30, "test": 30}
    assert world.manifest["n_kb_entities"] == world.kb.n_entities
