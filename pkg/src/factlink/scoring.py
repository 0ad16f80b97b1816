"""Initial entity scores: typing score, description score and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ContractError, ShapeError
from .layers import head, init_head


def init_scoring_params(store: ParameterStore, d_model: int, n_types: int,
                        hidden: int | None, rng) -> None:
    init_head(store, "ff1", d_model, n_types, hidden, rng)
    init_head(store, "ff2", d_model, d_model, hidden, rng)
    store.add("w1", np.array(1.0))
    store.add("w2", np.array(1.0))


def type_logits(mentions: Tensor, store: ParameterStore) -> Tensor:
    return head(mentions, store, "ff1")


def type_scores(logits: Tensor, cand_mention: np.ndarray, cand_types: np.ndarray,
                priors: np.ndarray | None) -> Tensor:
    """Vectorised typing score over a flat candidate list.

    ``logits`` is ``[M, T]``; candidate ``c`` belongs to mention ``cand_mention[c]``
    and has binary type row ``cand_types[c]``.
    """
    if cand_types.shape[1] != logits.shape[-1]:
        raise ShapeError(
            f"type vector length {cand_types.shape[1]} != type head width {logits.shape[-1]}"
        )
    per_cand = ad.take(logits, cand_mention)
    score = ad.tsum(ad.mul(per_cand, cand_types.astype(np.float64)), axis=1)
    if priors is not None:
        score = ad.add(score, np.asarray(priors, dtype=np.float64))
    return score


def type_score(m_i: Tensor, t_k, prior: float, store: ParameterStore) -> Tensor:
    m = ad.reshape(ad.as_tensor(m_i), (1, -1))
    t = np.asarray(t_k, dtype=np.float64).reshape(1, -1)
    out = type_scores(type_logits(m, store), np.zeros(1, dtype=np.intp), t, np.array([prior]))
    return ad.reshape(out, ())


def description_scores(mentions: Tensor, cand_mention: np.ndarray, desc_embs: Tensor,
                       store: ParameterStore) -> Tensor:
    proj = head(mentions, store, "ff2")
    if proj.shape[-1] != desc_embs.shape[-1]:
        raise ShapeError(f"projected mention dim {proj.shape[-1]} != description dim {desc_embs.shape[-1]}")
    return ad.tsum(ad.mul(ad.take(proj, cand_mention), desc_embs), axis=1)


def description_score(m_i: Tensor, desc_emb, store: ParameterStore) -> Tensor:
    m = ad.reshape(ad.as_tensor(m_i), (1, -1))
    d = ad.reshape(ad.as_tensor(desc_emb), (1, -1))
    return ad.reshape(description_scores(m, np.zeros(1, dtype=np.intp), d, store), ())


def initial_score(psi_t, psi_d, store: ParameterStore) -> Tensor:
    return ad.add(ad.mul(store["w1"], psi_t), ad.mul(store["w2"], psi_d))


def normalize_scores(psi_a, segments=None, n_segments: int | None = None) -> Tensor:
    """Softmax over each mention's candidates (one segment per mention)."""
    psi_a = ad.as_tensor(psi_a)
    if psi_a.size == 0:
        raise ContractError("cannot normalise an empty candidate set; skip the mention upstream")
    if segments is None:
        return ad.softmax(psi_a, axis=-1)
    return ad.segment_softmax(psi_a, segments, n_segments)


class CandidateLayout:
    """Flat (mention, candidate) index space for one document.

    Only mentions with at least one candidate take part; ``mentions[i]`` is
    the document index of local mention ``i``.  Flat row ``offsets[i] + k`` is
    candidate ``k`` of local mention ``i``.
    """

    def __init__(self, candidate_sets, golds=None):
        kept = [cs for cs in candidate_sets if len(cs)]
        self.mentions = np.array([cs.mention_index for cs in kept], dtype=np.intp)
        sizes = np.array([len(cs) for cs in kept], dtype=np.intp)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        self.entity = np.array([e for cs in kept for e, _ in cs.candidates], dtype=np.intp)
        self.prior = np.array([p for cs in kept for _, p in cs.candidates], dtype=np.float64)
        self.segment = np.repeat(np.arange(len(kept), dtype=np.intp), sizes)
        self.rank = np.concatenate([np.arange(s) for s in sizes]).astype(np.intp) if len(kept) else \
            np.zeros(0, dtype=np.intp)
        gold_flat = np.full(len(kept), -1, dtype=np.intp)
        if golds is not None:
            for i, cs in enumerate(kept):
                g = golds[cs.mention_index]
                for k, (e, _) in enumerate(cs.candidates):
                    if g is not None and e == g:
                        gold_flat[i] = self.offsets[i] + k
                        break
        self.gold_flat = gold_flat

    @property
    def n_mentions(self) -> int:
        return len(self.mentions)

    @property
    def n_flat(self) -> int:
        return len(self.entity)

    @property
    def max_candidates(self) -> int:
        return int(np.max(np.diff(self.offsets))) if self.n_mentions else 0


@dataclass
class ScoreBreakdown:
    """Per (mention, candidate) scores in a flat layout.

    Row ``c`` is candidate ``candidate_rank[c]`` of mention ``mention[c]``
    (mention index in the original document), entity ``entity[c]``.
    """

    mention: np.ndarray
    candidate_rank: np.ndarray
    entity: np.ndarray
    prior: np.ndarray
    psi_t: np.ndarray
    psi_d: np.ndarray
    psi_a: np.ndarray
    psi_a_norm: np.ndarray
    psi_s: np.ndarray
    psi_o: np.ndarray
    psi_b: np.ndarray
    psi_f: np.ndarray
    fields: tuple = field(default=("psi_t", "psi_d", "psi_a", "psi_a_norm", "psi_s", "psi_o", "psi_b", "psi_f"),
                          repr=False)

    def rows(self, mention_index: int) -> np.ndarray:
        return np.flatnonzero(self.mention == mention_index)

    def as_records(self) -> list[dict]:
        out = []
        for c in range(len(self.entity)):
            rec = {"mention": int(self.mention[c]), "entity": int(self.entity[c]),
                   "prior": float(self.prior[c])}
            rec.update({f: float(getattr(self, f)[c]) for f in self.fields})
            out.append(rec)
        return out
