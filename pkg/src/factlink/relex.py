"""Document-level relation scores between mention pairs.

Coarse-to-fine: a bilinear gate scores every ordered pair, the top-K pairs
are embedded and refined by a small transformer that attends to each other
and to the token embeddings, and the gate value scales the fine scores.
Pairs that are not kept score a zero vector.  A per-relation bilinear
baseline over all pairs is available for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ContractError
from .layers import block, init_block, init_layer_norm, init_linear, layer_norm, linear

DEFAULT_K = 600
COARSE2FINE = "coarse2fine"
BILINEAR = "bilinear"


@dataclass(frozen=True)
class RelexConfig:
    k: int = DEFAULT_K
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.05
    activation: str = "sigmoid"  # or "identity" for signed relation scores
    mode: str = COARSE2FINE

    def __post_init__(self):
        if self.k < 0:
            raise ContractError("K must be >= 0")
        if self.activation not in ("sigmoid", "identity"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.mode not in (COARSE2FINE, BILINEAR):
            raise ContractError(f"unknown relation mode {self.mode!r}")


def init_relex_params(store: ParameterStore, d_model: int, n_relations: int, cfg: RelexConfig, rng):
    if cfg.mode == COARSE2FINE:
        store.add("re.B.w", rng.normal(0.0, 1.0 / d_model, size=(d_model, d_model)))
        store.add("re.B.b", np.array(0.0))
        init_linear(store, "re.ff3", d_model, d_model // 2, rng)
        for i in range(cfg.n_layers):
            init_block(store, f"re.tr.l{i}", d_model, cfg.d_ff, rng, cross=True)
        if cfg.n_layers:
            init_layer_norm(store, "re.tr.lnf", d_model)
        init_linear(store, "re.ff4", d_model, n_relations, rng)
    else:
        store.add("re.bil.w", rng.normal(0.0, 1.0 / d_model, size=(d_model, n_relations, d_model)))
        store.add("re.bil.b", np.zeros(n_relations))


@dataclass
class RelationScores:
    n_mentions: int
    kept_pairs: list[tuple[int, int]]
    combined: Tensor  # [len(kept_pairs), |R|]
    coarse: Tensor | None = None  # [M, M], absent for the bilinear variant
    fine_pair_count: int = 0

    def pair_rows(self) -> np.ndarray:
        rows = np.full((self.n_mentions, self.n_mentions), -1, dtype=np.intp)
        for r, (i, j) in enumerate(self.kept_pairs):
            rows[i, j] = r
        return rows

    @property
    def n_relations(self) -> int:
        return self.combined.shape[-1]

    def vector(self, i: int, j: int) -> np.ndarray:
        r = self.pair_rows()[i, j]
        if r < 0:
            return np.zeros(self.n_relations)
        return self.combined.data[r].copy()

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_mentions, self.n_mentions, self.n_relations))
        for r, (i, j) in enumerate(self.kept_pairs):
            out[i, j] = self.combined.data[r]
        return out


def _activate(x: Tensor, cfg: RelexConfig) -> Tensor:
    return ad.sigmoid(x) if cfg.activation == "sigmoid" else x


def coarse_scores(mentions: Tensor, store: ParameterStore) -> Tensor:
    """Gate matrix ``sigmoid(m_i^T W m_j + b)`` with the diagonal zeroed."""
    m = mentions.shape[0]
    logits = ad.add(ad.matmul(ad.matmul(mentions, store["re.B.w"]), ad.transpose(mentions)),
                    store["re.B.b"])
    return ad.mul(ad.sigmoid(logits), 1.0 - np.eye(m))


def select_top_k(coarse, k: int) -> list[tuple[int, int]]:
    """The ``k`` off-diagonal pairs with the largest gate value.

    Ties break by lexicographic ``(i, j)``; the result is returned in
    lexicographic order so that the fine transformer sees a canonical set.
    """
    if k < 0:
        raise ContractError("K must be >= 0")
    c = coarse.data if isinstance(coarse, Tensor) else np.asarray(coarse)
    m = c.shape[0]
    ii, jj = np.nonzero(~np.eye(m, dtype=bool))
    if len(ii) <= k:
        return list(zip(ii.tolist(), jj.tolist()))
    order = np.lexsort((jj, ii, -c[ii, jj]))[:k]
    return sorted(zip(ii[order].tolist(), jj[order].tolist()))


def fine_scores(kept_pairs, mentions: Tensor, H: Tensor, store: ParameterStore, cfg: RelexConfig,
                training: bool = False, rng=None) -> Tensor:
    """Relation scores ``[P, |R|]`` for the kept pairs (activation applied)."""
    n_rel = store["re.ff4.w"].shape[1]
    if not kept_pairs:
        return Tensor(np.zeros((0, n_rel)))
    ii = np.array([p[0] for p in kept_pairs], dtype=np.intp)
    jj = np.array([p[1] for p in kept_pairs], dtype=np.intp)
    half = linear(mentions, store, "re.ff3")
    x = ad.concat([ad.take(half, ii), ad.take(half, jj)], axis=1)
    for i in range(cfg.n_layers):
        x = block(x, store, f"re.tr.l{i}", cfg.n_heads, memory=H,
                  dropout=cfg.dropout, training=training, rng=rng)
    if cfg.n_layers:
        x = layer_norm(x, store, "re.tr.lnf")
    return _activate(linear(x, store, "re.ff4"), cfg)


def combine_relation_scores(coarse: Tensor, fine: Tensor, kept_pairs) -> RelationScores:
    m = coarse.shape[0]
    if kept_pairs:
        flat = np.array([i * m + j for i, j in kept_pairs], dtype=np.intp)
        gate = ad.reshape(ad.take(ad.reshape(coarse, (m * m,)), flat), (len(kept_pairs), 1))
        combined = ad.mul(gate, fine)
    else:
        combined = fine
    return RelationScores(m, list(kept_pairs), combined, coarse, fine_pair_count=len(kept_pairs))


def bilinear_relation_scores(mentions: Tensor, store: ParameterStore, cfg: RelexConfig) -> RelationScores:
    """Per-relation bilinear scores for every ordered off-diagonal pair."""
    m, d = mentions.shape
    w = store["re.bil.w"]
    n_rel = w.shape[1]
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
    if not pairs:
        return RelationScores(m, [], Tensor(np.zeros((0, n_rel))), None, 0)
    ii = np.array([p[0] for p in pairs], dtype=np.intp)
    jj = np.array([p[1] for p in pairs], dtype=np.intp)
    heads = ad.take(mentions, ii)  # [P, d]
    tails = ad.take(mentions, jj)
    proj = ad.reshape(ad.matmul(heads, ad.reshape(w, (d, n_rel * d))), (len(pairs), n_rel, d))
    logits = ad.add(ad.tsum(ad.mul(proj, ad.reshape(tails, (len(pairs), 1, d))), axis=2), store["re.bil.b"])
    return RelationScores(m, pairs, _activate(logits, cfg), None, fine_pair_count=len(pairs))


def relation_scores(mentions: Tensor, H: Tensor, store: ParameterStore, cfg: RelexConfig,
                    k: int | None = None, training: bool = False, rng=None) -> RelationScores:
    if cfg.mode == BILINEAR:
        return bilinear_relation_scores(mentions, store, cfg)
    coarse = coarse_scores(mentions, store)
    kept = select_top_k(coarse, cfg.k if k is None else k)
    fine = fine_scores(kept, mentions, H, store, cfg, training, rng)
    return combine_relation_scores(coarse, fine, kept)
