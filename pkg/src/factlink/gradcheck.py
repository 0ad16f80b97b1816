"""Finite-difference check of the whole model on a small fixed document."""
from __future__ import annotations

from . import autodiff as ad
from .candidates import build_pem
from .corpus import Document, Mention, Vocab
from .encoder import EncoderConfig
from .kb import INSTANCE_OF, KnowledgeBase, TypeVocab, build_fact_index, build_relation_vocab
from .model import AblationFlags, KBArtifacts, ModelConfig, EDModel
from .relex import RelexConfig
from .training import ed_loss

MODULES = {
    "encoder": ("enc.", "desc."),
    "scoring": ("ff1.", "ff2.", "w1", "w2"),
    "relex": ("re.",),
    "kb_score": ("w3", "w4"),
}
THRESHOLD = 1e-4
# KB weights used at the check point; they lift relation-module gradients well
# above the round-off noise of a float64 central difference (about 1e-11 here)
KB_WEIGHT = 4.0


def fixture(seed: int = 0, flags: AblationFlags | None = None, d_model: int = 8, kb_weight: float = KB_WEIGHT):
    """A 3-mention document whose candidates are linked by KB facts, plus a tiny model."""
    labels = ["person", "city", "ann", "ann", "bo", "bo", "cyr", "cyr"]
    descs = ["", "", "person writer", "person singer", "city river", "city port", "person poet", "city hill"]
    triples = [(2, INSTANCE_OF, 0), (3, INSTANCE_OF, 0), (4, INSTANCE_OF, 1), (5, INSTANCE_OF, 1),
               (6, INSTANCE_OF, 0), (7, INSTANCE_OF, 1),
               (3, "born_in", 4), (4, "near", 7), (6, "born_in", 5), (2, "knows", 6), (3, "knows", 6)]
    kb = KnowledgeBase.from_named(labels, triples, descs)
    rvocab = build_relation_vocab(kb)
    pem = build_pem([("ann", 2, 7), ("ann", 3, 3), ("bo", 4, 6), ("bo", 5, 4), ("cyr", 6, 5), ("cyr", 7, 5)])
    words = ["person", "city", "ann", "bo", "cyr", "writer", "singer", "river", "port", "poet", "hill",
             "was", "born", "in", "and", "met", "."]
    vocab = Vocab(words)
    text = "ann was born in bo and met cyr ."
    doc = Document("gradcheck", tuple(vocab.encode(text)),
                   (Mention(0, 1, "ann", 3), Mention(4, 5, "bo", 4), Mention(7, 8, "cyr", 6)))
    types = TypeVocab(((kb.relation_id(INSTANCE_OF), 0), (kb.relation_id(INSTANCE_OF), 1)))
    art = KBArtifacts(kb, rvocab, types, build_fact_index(kb, rvocab), pem, vocab)
    enc = EncoderConfig(vocab_size=len(vocab), d_model=d_model, n_layers=1, n_heads=2, max_seq_len=16,
                        desc_n_layers=1, desc_max_tokens=8, d_ff=2 * d_model, dropout=0.0)
    config = ModelConfig(enc, len(types), rvocab.size, RelexConfig(k=600, n_layers=1, n_heads=2, d_ff=2 * d_model,
                                                                    dropout=0.0),
                         task_hidden=d_model, flags=flags or AblationFlags(), seed=seed)
    model = EDModel(config, art)
    if model.flags.use_kb:
        model.store["w3"].data[...] = kb_weight
        model.store["w4"].data[...] = kb_weight
    return model, doc


def module_of(name: str) -> str:
    for module, prefixes in MODULES.items():
        if any(name == p or name.startswith(p) for p in prefixes):
            return module
    return "other"


def run(module: str = "all", seed: int = 0, step: float = 1e-5, coords_per_param: int = 64,
        flags: AblationFlags | None = None) -> dict:
    """Per-parameter max relative error, restricted to ``module`` unless ``all``."""
    model, doc = fixture(seed, flags)
    names = [n for n in model.store.names() if module == "all" or module_of(n) == module]

    def objective(store):
        return ed_loss([model.forward(doc, training=False)]).loss

    report = ad.finite_diff_report(objective, model.store, step=step, coords_per_param=coords_per_param,
                                   seed=seed, names=names)
    worst = max(report.values(), default=0.0)
    return {"module": module, "max_relative_error": worst, "passed": worst < THRESHOLD,
            "per_parameter": report}
