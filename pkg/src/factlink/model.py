"""The full disambiguation model: parameters, ablation switches and the forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .candidates import DEFAULT_N_CANDIDATES, CandidateSet, PemTable, document_candidates
from .corpus import Document, Vocab
from .encoder import (EncoderConfig, description_ids, encode_descriptions, encode_document,
                      init_encoder_params, pool_mentions)
from .errors import ContractError
from .kb import KnowledgeBase, RelationVocab, SparseFactIndex, TypeVocab, type_matrix
from .kbscore import (FactTensor, final_score, gather_fact_tensor, init_kb_params, kb_score,
                      relation_class_filter, subject_object_scores)
from .relex import BILINEAR, COARSE2FINE, RelationScores, RelexConfig, init_relex_params, relation_scores
from .scoring import (CandidateLayout, ScoreBreakdown, description_scores, init_scoring_params,
                      initial_score, normalize_scores, type_logits, type_scores)


@dataclass(frozen=True)
class AblationFlags:
    use_kb: bool = True
    use_types: bool = True
    use_descriptions: bool = True
    use_prior: bool = True
    re_mode: str = COARSE2FINE
    use_same_as: bool = True
    use_other: bool = True
    collapse_relations: bool = False
    use_task_hidden: bool = True
    signed_relation_scores: bool = False

    def __post_init__(self):
        if not (self.use_types or self.use_descriptions or self.use_kb):
            raise ContractError("at least one of types, descriptions or KB must stay enabled")
        if self.re_mode not in (COARSE2FINE, BILINEAR):
            raise ContractError(f"unknown re_mode {self.re_mode!r}")


ABLATIONS: dict[str, dict] = {
    "no-kb": {"use_kb": False},
    "no-types": {"use_types": False},
    "no-descriptions": {"use_descriptions": False},
    "no-prior": {"use_prior": False},
    "types-only": {"use_kb": False, "use_descriptions": False},
    "descriptions-only": {"use_kb": False, "use_types": False},
    "kb-only": {"use_types": False, "use_descriptions": False},
    "bilinear": {"re_mode": BILINEAR},
    "no-same-as": {"use_same_as": False},
    "no-other": {"use_other": False},
    "collapsed": {"collapse_relations": True},
    "no-task-hidden": {"use_task_hidden": False},
    "signed-relation-scores": {"signed_relation_scores": True},
}


def ablate(flags: AblationFlags, names: Sequence[str]) -> AblationFlags:
    changes: dict = {}
    for name in names:
        if name not in ABLATIONS:
            raise ContractError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        changes.update(ABLATIONS[name])
    return replace(flags, **changes)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    n_types: int
    n_relations: int
    relex: RelexConfig = field(default_factory=RelexConfig)
    task_hidden: int = 64
    n_candidates: int = DEFAULT_N_CANDIDATES
    flags: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["relex"] = RelexConfig(**d["relex"])
        d["flags"] = AblationFlags(**d["flags"])
        return cls(**d)

    def effective_relex(self) -> RelexConfig:
        return replace(
            self.relex,
            mode=self.flags.re_mode,
            activation="identity" if self.flags.signed_relation_scores else "sigmoid",
        )


@dataclass
class KBArtifacts:
    kb: KnowledgeBase
    relation_vocab: RelationVocab
    type_vocab: TypeVocab
    index: SparseFactIndex
    pem: PemTable
    vocab: Vocab


def init_params(config: ModelConfig) -> ParameterStore:
    rng = np.random.default_rng(config.seed)
    store = ParameterStore()
    enc = config.encoder
    init_encoder_params(store, enc, rng)
    hidden = config.task_hidden if config.flags.use_task_hidden else None
    init_scoring_params(store, enc.d_model, config.n_types, hidden, rng)
    init_relex_params(store, enc.d_model, config.n_relations, config.effective_relex(), rng)
    init_kb_params(store)
    if not config.flags.use_kb:
        store["w3"].data[...] = 0.0
        store["w4"].data[...] = 0.0
    return store


@dataclass
class DocOutput:
    layout: CandidateLayout
    psi_t: Tensor
    psi_d: Tensor
    psi_a: Tensor
    psi_a_norm: Tensor
    psi_s: Tensor
    psi_o: Tensor
    psi_b: Tensor
    psi_f: Tensor
    relations: RelationScores | None = None
    facts: FactTensor | None = None

    def breakdown(self) -> ScoreBreakdown:
        lay = self.layout
        return ScoreBreakdown(
            mention=lay.mentions[lay.segment] if lay.n_flat else np.zeros(0, dtype=np.intp),
            candidate_rank=lay.rank,
            entity=lay.entity,
            prior=lay.prior,
            psi_t=self.psi_t.data.copy(),
            psi_d=self.psi_d.data.copy(),
            psi_a=self.psi_a.data.copy(),
            psi_a_norm=self.psi_a_norm.data.copy(),
            psi_s=self.psi_s.data.copy(),
            psi_o=self.psi_o.data.copy(),
            psi_b=self.psi_b.data.copy(),
            psi_f=self.psi_f.data.copy(),
        )


class DescriptionTable:
    """Description embeddings for a set of entities, computed in one batched pass."""

    def __init__(self, model: "EDModel", entity_ids, training=False, rng=None):
        ids = sorted(set(int(e) for e in entity_ids))
        self.row = {e: r for r, e in enumerate(ids)}
        seqs = [model.description_sequence(e) for e in ids]
        self.embeddings = encode_descriptions(seqs, model.store, model.config.encoder, training, rng)

    def rows(self, entity_ids) -> np.ndarray:
        return np.array([self.row[int(e)] for e in entity_ids], dtype=np.intp)


class EDModel:
    def __init__(self, config: ModelConfig, artifacts: KBArtifacts, store: ParameterStore | None = None,
                 flags: AblationFlags | None = None):
        self.config = config
        self.artifacts = artifacts
        self.store = store if store is not None else init_params(config)
        self.flags = flags or config.flags
        if self.flags.re_mode != config.flags.re_mode or self.flags.use_task_hidden != config.flags.use_task_hidden:
            raise ContractError("relation mode and task-hidden layers are fixed when the model is built")
        self.relex = replace(
            config.effective_relex(),
            activation="identity" if self.flags.signed_relation_scores else "sigmoid",
        )
        self._types = type_matrix(artifacts.kb, artifacts.type_vocab).astype(np.float64)
        if self._types.shape[1] != config.n_types:
            raise ContractError(f"type vocabulary has {self._types.shape[1]} types, config says {config.n_types}")
        if artifacts.relation_vocab.size != config.n_relations:
            raise ContractError("relation vocabulary size does not match the config")
        self._mask_filter = relation_class_filter(
            artifacts.index, self.flags.use_same_as, self.flags.use_other, self.flags.collapse_relations
        )
        self._desc_cache: dict[int, list[int]] = {}

    def with_flags(self, flags: AblationFlags) -> "EDModel":
        """Same parameters, different inference-time switches."""
        return EDModel(self.config, self.artifacts, self.store, flags)

    def description_sequence(self, e: int) -> list[int]:
        seq = self._desc_cache.get(e)
        if seq is None:
            ent = self.artifacts.kb.entities[e]
            seq = description_ids(self.artifacts.vocab, ent.label, ent.description,
                                  self.config.encoder.desc_max_tokens)
            self._desc_cache[e] = seq
        return seq

    def candidates(self, doc: Document, n: int | None = None) -> list[CandidateSet]:
        return document_candidates(self.artifacts.pem, doc, n or self.config.n_candidates)

    def forward(self, doc: Document, candidate_sets: Sequence[CandidateSet] | None = None, *,
                training: bool = False, rng=None, descriptions: DescriptionTable | None = None,
                k: int | None = None) -> DocOutput:
        flags = self.flags
        store = self.store
        if candidate_sets is None:
            candidate_sets = self.candidates(doc)
        layout = CandidateLayout(candidate_sets, [m.gold for m in doc.mentions])
        n_flat = layout.n_flat
        if layout.n_mentions == 0:
            z = Tensor(np.zeros(0))
            return DocOutput(layout, z, z, z, z, z, z, z, z)

        H = encode_document(doc.tokens, store, self.config.encoder, training, rng)
        mentions = pool_mentions(H, [doc.mentions[i].span for i in layout.mentions])
        prior = layout.prior if flags.use_prior else None

        if flags.use_types:
            psi_t = type_scores(type_logits(mentions, store), layout.segment, self._types[layout.entity], prior)
        else:
            psi_t = Tensor(prior.copy() if prior is not None else np.zeros(n_flat))
        if flags.use_descriptions:
            if descriptions is None:
                descriptions = DescriptionTable(self, layout.entity, training, rng)
            desc = ad.take(descriptions.embeddings, descriptions.rows(layout.entity))
            psi_d = description_scores(mentions, layout.segment, desc, store)
        else:
            psi_d = Tensor(np.zeros(n_flat))
        psi_a = initial_score(psi_t, psi_d, store)
        psi_a_norm = normalize_scores(psi_a, layout.segment, layout.n_mentions)

        rel = facts = None
        if flags.use_kb:
            rel = relation_scores(mentions, H, store, self.relex, k=k, training=training, rng=rng)
            facts = gather_fact_tensor(self.artifacts.index, layout, self._mask_filter)
            psi_s, psi_o = subject_object_scores(rel, facts, psi_a_norm)
            psi_b = kb_score(psi_s, psi_o, store)
        else:
            psi_s = psi_o = psi_b = Tensor(np.zeros(n_flat))
        psi_f = final_score(psi_a, psi_b)
        return DocOutput(layout, psi_t, psi_d, psi_a, psi_a_norm, psi_s, psi_o, psi_b, psi_f, rel, facts)


def build_model(artifacts: KBArtifacts, encoder: EncoderConfig | None = None, *,
                flags: AblationFlags | None = None, relex: RelexConfig | None = None,
                task_hidden: int = 64, n_candidates: int = DEFAULT_N_CANDIDATES, seed: int = 0) -> EDModel:
    encoder = encoder or EncoderConfig(vocab_size=len(artifacts.vocab))
    config = ModelConfig(
        encoder=encoder,
        n_types=len(artifacts.type_vocab),
        n_relations=artifacts.relation_vocab.size,
        relex=relex or RelexConfig(n_heads=encoder.n_heads, d_ff=encoder.d_ff, dropout=encoder.dropout),
        task_hidden=task_hidden,
        n_candidates=n_candidates,
        flags=flags or AblationFlags(),
        seed=seed,
    )
    return EDModel(config, artifacts)
