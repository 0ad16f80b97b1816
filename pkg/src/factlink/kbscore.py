"""KB fact retrieval for a document and the fact-based scores.

Every ordered pair of (mention, candidate) rows whose entities are linked in
the KB becomes one sparse entry of the fact tensor.  Each entry contributes
``softmaxed_score(subject) * (relation_scores . fact_bits) * softmaxed_score(object)``
to the subject row's subject-side score and to the object row's object-side
score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ContractError
from .kb import SparseFactIndex
from .relex import RelationScores
from .scoring import CandidateLayout


def init_kb_params(store: ParameterStore) -> None:
    store.add("w3", np.array(1.0))
    store.add("w4", np.array(1.0))


def relation_class_filter(index: SparseFactIndex, use_same_as=True, use_other=True, collapse=False):
    """Mask transform implementing the relation-vocabulary ablations."""
    vocab = index.vocab
    other_bit = 1 << vocab.other_class_index
    same_bit = 1 << vocab.same_as_index
    standard = sum(1 << c for c in range(len(vocab.standard)))

    def apply(mask: int) -> int:
        if collapse and mask & standard:
            mask = (mask & ~standard) | other_bit
        if not use_other:
            mask &= ~other_bit
        if not use_same_as:
            mask &= ~same_bit
        return mask

    return apply


@dataclass
class FactTensor:
    """Sparse ``[M, M, C, C, |R|]`` binary tensor; only nonzero entries are stored."""

    shape: tuple[int, int, int, int, int]
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    n: np.ndarray
    subj_row: np.ndarray  # flat candidate row of (i, k)
    obj_row: np.ndarray  # flat candidate row of (j, n)
    bits: np.ndarray  # [n_entries, |R|] uint8

    def __len__(self):
        return len(self.i)

    @property
    def n_relations(self) -> int:
        return self.shape[4]

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint8)
        out[self.i, self.j, self.k, self.n] = self.bits
        return out

    def entry(self, i, j, k, n) -> np.ndarray:
        hit = np.flatnonzero((self.i == i) & (self.j == j) & (self.k == k) & (self.n == n))
        if len(hit):
            return self.bits[hit[0]].copy()
        return np.zeros(self.n_relations, dtype=np.uint8)


def _bits(masks: list[int], size: int) -> np.ndarray:
    out = np.zeros((len(masks), size), dtype=np.uint8)
    for row, m in enumerate(masks):
        c = 0
        while m:
            if m & 1:
                out[row, c] = 1
            m >>= 1
            c += 1
    return out


def gather_fact_tensor(index: SparseFactIndex, layout: CandidateLayout, mask_filter=None) -> FactTensor:
    """Collect KB relations between candidates of distinct mentions."""
    size = index.vocab.size
    seg = layout.segment
    positions: dict[int, list[int]] = {}
    for row, e in enumerate(layout.entity.tolist()):
        positions.setdefault(e, []).append(row)

    found: dict[tuple[int, int], int] = {}
    for a, e in enumerate(layout.entity.tolist()):
        for o, m in index.objects_of(e).items():
            for b in positions.get(o, ()):
                if seg[b] != seg[a]:
                    found[(a, b)] = found.get((a, b), 0) | m
    same_bit = 1 << index.vocab.same_as_index
    for rows in positions.values():
        for a in rows:
            for b in rows:
                if seg[a] != seg[b]:
                    found[(a, b)] = found.get((a, b), 0) | same_bit

    keys, masks = [], []
    for (a, b), m in sorted(found.items()):
        if mask_filter is not None:
            m = mask_filter(m)
        if m:
            keys.append((a, b))
            masks.append(m)
    a = np.array([k[0] for k in keys], dtype=np.intp)
    b = np.array([k[1] for k in keys], dtype=np.intp)
    off = layout.offsets
    shape = (layout.n_mentions, layout.n_mentions, layout.max_candidates, layout.max_candidates, size)
    return FactTensor(
        shape=shape,
        i=seg[a] if len(a) else a,
        j=seg[b] if len(b) else b,
        k=a - off[seg[a]] if len(a) else a,
        n=b - off[seg[b]] if len(b) else b,
        subj_row=a,
        obj_row=b,
        bits=_bits(masks, size),
    )


def subject_object_scores(rel: RelationScores, facts: FactTensor, psi_a_norm: Tensor) -> tuple[Tensor, Tensor]:
    n_flat = psi_a_norm.shape[0]
    if rel.n_mentions != facts.shape[0]:
        raise ContractError(f"relation scores cover {rel.n_mentions} mentions, fact tensor {facts.shape[0]}")
    if len(facts) and rel.n_relations != facts.n_relations:
        raise ContractError(f"relation scores have {rel.n_relations} classes, facts {facts.n_relations}")
    if len(facts) and max(facts.subj_row.max(), facts.obj_row.max()) >= n_flat:
        raise ContractError("fact tensor rows exceed the candidate index space")
    rows = rel.pair_rows()[facts.i, facts.j] if len(facts) else np.zeros(0, dtype=np.intp)
    live = rows >= 0
    if not np.any(live):
        zero = Tensor(np.zeros(n_flat))
        return zero, Tensor(np.zeros(n_flat))
    a, b = facts.subj_row[live], facts.obj_row[live]
    rel_dot = ad.tsum(ad.mul(ad.take(rel.combined, rows[live]), facts.bits[live].astype(np.float64)), axis=1)
    contrib = ad.mul(ad.mul(ad.take(psi_a_norm, a), rel_dot), ad.take(psi_a_norm, b))
    return ad.scatter_add(contrib, a, n_flat), ad.scatter_add(contrib, b, n_flat)


def kb_score(psi_s, psi_o, store: ParameterStore) -> Tensor:
    return ad.add(ad.mul(store["w3"], psi_s), ad.mul(store["w4"], psi_o))


def final_score(psi_a, psi_b) -> Tensor:
    return ad.add(psi_a, psi_b)


def weighted_facts(rel: RelationScores, facts: FactTensor, psi_a_norm: np.ndarray,
                   layout: CandidateLayout, class_names: list[str], min_contribution: float = 0.0):
    """Per-relation contributions of every retrieved fact, for inspection."""
    rows = rel.pair_rows()
    pa = np.asarray(psi_a_norm)
    out = []
    for e in range(len(facts)):
        r = rows[facts.i[e], facts.j[e]]
        if r < 0:
            continue
        vec = rel.combined.data[r]
        a, b = facts.subj_row[e], facts.obj_row[e]
        for c in np.flatnonzero(facts.bits[e]):
            value = float(pa[a] * vec[c] * pa[b])
            if value == 0.0 or abs(value) < min_contribution:
                continue
            out.append({
                "i": int(layout.mentions[facts.i[e]]),
                "j": int(layout.mentions[facts.j[e]]),
                "e_k": int(layout.entity[a]),
                "relation": class_names[c],
                "e_n": int(layout.entity[b]),
                "contribution": value,
            })
    return out
