"""Independent brute-force oracles shared by the unit and acceptance tests."""
import numpy as np

from factlink.autodiff import Tensor
from factlink.candidates import CandidateSet
from factlink.kb import KnowledgeBase, build_fact_index, build_relation_vocab, lookup_relations
from factlink.relex import RelationScores
from factlink.scoring import CandidateLayout


def dense_subject_object(index, layout, rel_dense, psi_a_norm):
    """Five nested loops over (i, j, k, n, r), straight from the definition."""
    psi_s = np.zeros(layout.n_flat)
    psi_o = np.zeros(layout.n_flat)
    off = layout.offsets
    m = layout.n_mentions
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            for k in range(off[i + 1] - off[i]):
                for n in range(off[j + 1] - off[j]):
                    a, b = off[i] + k, off[j] + n
                    bits = lookup_relations(index, int(layout.entity[a]), int(layout.entity[b]))
                    for r in range(len(bits)):
                        if bits[r]:
                            c = psi_a_norm[a] * rel_dense[i, j, r] * psi_a_norm[b]
                            psi_s[a] += c
                            psi_o[b] += c
    return psi_s, psi_o


def random_fact_case(seed, max_mentions=6, max_candidates=5, max_relations=8, n_entities=12, drop=0.3):
    """Random KB, candidate sets, relation scores and normalised scores.

    ``max_relations`` standard relations plus OTHER and SAME_AS keep the class
    count at most ``max_relations + 2``.
    """
    rng = np.random.default_rng(seed)
    n_rel = int(rng.integers(1, max_relations + 1))
    facts = [(int(rng.integers(n_entities)), f"r{int(rng.integers(n_rel + 2))}", int(rng.integers(n_entities)))
             for _ in range(int(rng.integers(5, 40)))]
    kb = KnowledgeBase.from_named([f"e{i}" for i in range(n_entities)], facts)
    index = build_fact_index(kb, build_relation_vocab(kb, n_rel))
    m = int(rng.integers(1, max_mentions + 1))
    sets = []
    for i in range(m):
        c = int(rng.integers(1, max_candidates + 1))
        ents = rng.choice(n_entities, size=c, replace=False)
        sets.append(CandidateSet(i, tuple((int(e), 1.0 / c) for e in ents)))
    layout = CandidateLayout(sets)
    size = index.vocab.size
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j and rng.random() > drop]
    combined = rng.uniform(0.0, 1.0, size=(len(pairs), size))
    rel = RelationScores(m, pairs, Tensor(combined))
    raw = rng.normal(size=layout.n_flat)
    norm = np.empty_like(raw)
    for s in range(m):
        sl = slice(layout.offsets[s], layout.offsets[s + 1])
        e = np.exp(raw[sl] - raw[sl].max())
        norm[sl] = e / e.sum()
    return index, layout, rel, norm


def greedy_oracle(kb, examples, budget):
    """Exhaustive per-step greedy: re-evaluate every candidate type from scratch."""
    allowed = {kb.relation_id(r) for r in ("instance_of", "occupation", "country", "sport")} - {None}
    ex = [(g, sorted(set(n) - {g})) for g, n in examples]
    ex = [(g, n) for g, n in ex if n]
    ents = {g for g, _ in ex} | {x for _, n in ex for x in n}
    pool = sorted({t for e in ents for t in kb.expanded_types(e) if t[0] in allowed})

    def restricted(e, chosen):
        have = kb.expanded_types(e)
        return tuple(t in have for t in chosen)

    def n_separated(chosen):
        return sum(all(restricted(g, chosen) != restricted(x, chosen) for x in n) for g, n in ex)

    chosen = []
    while len(chosen) < budget:
        base = n_separated(chosen)
        best, best_gain = None, 0
        for t in pool:
            if t in chosen:
                continue
            gain = n_separated(chosen + [t]) - base
            if gain > best_gain:
                best, best_gain = t, gain
        if best is None:
            break
        chosen.append(best)
    return tuple(chosen)
