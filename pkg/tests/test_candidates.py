import pytest
from hypothesis import given, settings, strategies as st

from factlink.candidates import (build_pem, candidate_recall, candidates_for, load_pem, normalize_alias,
                                 write_alias_counts)
from factlink.corpus import Document, Mention
from factlink.errors import ValidationError


def test_priors_follow_counts():
    pem = build_pem([("england", 10, 92), ("england", 11, 8)])
    assert pem["england"] == ((10, 0.92), (11, 0.08))
    assert build_pem([("solo", 3, 7)])["solo"] == ((3, 1.0),)


def test_hand_normalised_rows():
    rows = [("A b", 1, 3), ("a  B", 2, 1), ("a b", 1, 1), ("x", 5, 2), ("x", 4, 2), ("y", 9, 1), ("Y", 8, 3)]
    pem = build_pem(rows)
    assert pem["a b"] == ((1, 0.8), (2, 0.2))
    assert pem["x"] == ((4, 0.5), (5, 0.5))  # tie broken by ascending id
    assert pem["y"] == ((8, 0.75), (9, 0.25))
    assert len(pem) == 3


def test_invalid_counts():
    with pytest.raises(ValidationError):
        build_pem([("a", 1, 0)])
    with pytest.raises(ValidationError):
        build_pem([("a", 1, -2)])


def test_normalisation():
    assert normalize_alias("  New\tYORK  city ") == "new york city"


def test_candidates_for_examples():
    pem = build_pem([("a", 1, 1), ("a", 2, 3)])
    cs = candidates_for(pem, "A", 30)
    assert cs.entity_ids == [2, 1]
    assert candidates_for(pem, "unknown", 30).candidates == ()
    with pytest.raises(ValueError):
        candidates_for(pem, "a", 0)

    rows = [("big", e, (e * 37) % 101 + 1) for e in range(40)]
    pem = build_pem(rows)
    full = sorted(((-(c), e) for _, e, c in rows))
    expect = [e for _, e in full[:30]]
    assert candidates_for(pem, "big", 30).entity_ids == expect
    assert candidates_for(pem, "big", 30, gold=expect[0]).gold_present
    assert not candidates_for(pem, "big", 30, gold=full[35][1]).gold_present


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(1, 50)), min_size=1, max_size=20),
       st.integers(1, 25), st.integers(2, 9))
def test_candidate_properties(pairs, n, scale):
    pem = build_pem([("m", e, c) for e, c in pairs])
    row = pem["m"]
    assert abs(sum(p for _, p in row) - 1.0) < 1e-9
    assert all(0 < p <= 1 for _, p in row)
    keys = [(-p, e) for e, p in row]
    assert keys == sorted(keys)
    small = set(candidates_for(pem, "m", n).entity_ids)
    assert small <= set(candidates_for(pem, "m", n + 1).entity_ids)
    scaled = build_pem([("m", e, c * scale) for e, c in pairs])
    assert [e for e, _ in scaled["m"]] == [e for e, _ in row]
    assert all(abs(p - q) < 1e-12 for (_, p), (_, q) in zip(scaled["m"], row))


def doc_with(surfaces_golds):
    tokens = tuple(range(len(surfaces_golds)))
    mentions = tuple(Mention(i, i + 1, s, g) for i, (s, g) in enumerate(surfaces_golds))
    return Document("d", tokens, mentions)


def test_candidate_recall_examples():
    pem = build_pem([("a", 1, 5), ("a", 2, 1), ("b", 3, 1), ("c", 4, 2), ("c", 5, 1)])
    assert candidate_recall(pem, [doc_with([("a", 1), ("b", 3), ("c", 4)])], 30) == 100.0
    docs = [doc_with([("a", 1), ("b", 3), ("c", 4), ("a", 2), ("zzz", 9)])]
    assert candidate_recall(pem, docs, 30) == 80.0
    assert candidate_recall(pem, docs, 1) <= candidate_recall(pem, docs, None)
    with pytest.raises(ValidationError):
        candidate_recall(pem, [], 30)


def test_pem_file_round_trip(tmp_path):
    rows = [("a b", 1, 3), ("a b", 2, 1), ("x", 5, 2)]
    write_alias_counts(rows, tmp_path / "pem.tsv")
    assert load_pem(tmp_path / "pem.tsv") == build_pem(rows)
