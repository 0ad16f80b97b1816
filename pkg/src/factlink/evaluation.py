"""Inference, InKB micro-F1 and the relation-prediction analysis."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Document
from .model import AblationFlags, DescriptionTable, DocOutput, EDModel
from .relex import RelationScores
from .scoring import ScoreBreakdown

ABSTAIN = None


@dataclass
class MentionPrediction:
    span: tuple[int, int]
    predicted: int | None
    gold: int | None
    candidates: list[int] = field(default_factory=list)
    psi_f: list[float] = field(default_factory=list)
    psi_a: list[float] = field(default_factory=list)
    psi_b: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"span": list(self.span), "predicted": self.predicted, "gold": self.gold,
                "candidates": self.candidates, "psi_f": self.psi_f, "psi_a": self.psi_a,
                "psi_b": self.psi_b}


@dataclass
class Prediction:
    doc_id: str
    mentions: list[MentionPrediction]
    breakdown: ScoreBreakdown | None = None
    relations: RelationScores | None = None

    @property
    def predicted(self) -> list[int | None]:
        return [m.predicted for m in self.mentions]

    @property
    def golds(self) -> list[int | None]:
        return [m.gold for m in self.mentions]

    def to_json(self) -> dict:
        return {"doc_id": self.doc_id, "mentions": [m.to_json() for m in self.mentions]}


def choose(psi_f: np.ndarray, prior: np.ndarray, entity: np.ndarray) -> int:
    """Index of the best row: highest score, then higher prior, then smaller id."""
    return int(np.lexsort((entity, -prior, -psi_f))[0])


def predictions_from_output(doc: Document, out: DocOutput) -> Prediction:
    lay = out.layout
    psi_f, psi_a, psi_b = out.psi_f.data, out.psi_a.data, out.psi_b.data
    local = {int(m): i for i, m in enumerate(lay.mentions)}
    mentions = []
    for x, m in enumerate(doc.mentions):
        i = local.get(x)
        if i is None:
            mentions.append(MentionPrediction(m.span, ABSTAIN, m.gold))
            continue
        lo, hi = lay.offsets[i], lay.offsets[i + 1]
        best = choose(psi_f[lo:hi], lay.prior[lo:hi], lay.entity[lo:hi])
        mentions.append(MentionPrediction(
            m.span, int(lay.entity[lo + best]), m.gold,
            lay.entity[lo:hi].tolist(), psi_f[lo:hi].tolist(), psi_a[lo:hi].tolist(), psi_b[lo:hi].tolist(),
        ))
    return Prediction(doc.id, mentions, out.breakdown(), out.relations)


def disambiguate(model: EDModel, document: Document, flags: AblationFlags | None = None,
                 k: int | None = None, descriptions: DescriptionTable | None = None) -> Prediction:
    if flags is not None and flags != model.flags:
        model = model.with_flags(flags)
    out = model.forward(document, training=False, descriptions=descriptions, k=k)
    return predictions_from_output(document, out)


def predict(model: EDModel, documents: Sequence[Document], k: int | None = None) -> list[Prediction]:
    descriptions = None
    if model.flags.use_descriptions:
        ents = {e for d in documents for cs in model.candidates(d) for e in cs.entity_ids}
        if ents:
            descriptions = DescriptionTable(model, ents)
    return [disambiguate(model, d, k=k, descriptions=descriptions) for d in documents]


def micro_prf(predicted: Iterable[int | None], golds: Iterable[int | None]) -> tuple[float, float, float]:
    """InKB micro precision, recall and F1.

    Mentions without a gold entity are ignored.  Abstentions count against
    recall only.  Any zero denominator gives 0.
    """
    correct = n_pred = n_gold = 0
    for p, g in zip(predicted, golds, strict=True):
        if g is None:
            continue
        n_gold += 1
        if p is ABSTAIN:
            continue
        n_pred += 1
        correct += p == g
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def micro_f1(predicted, golds=None) -> float:
    """Micro-F1 from parallel id lists, or from a list of :class:`Prediction`."""
    if golds is None:
        preds = list(predicted)
        predicted = [p for pr in preds for p in pr.predicted]
        golds = [g for pr in preds for g in pr.golds]
    return micro_prf(predicted, golds)[2]


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    n_mentions: int
    predictions: list[Prediction]


def select_mentions(predictions: Sequence[Prediction], subset=None, exclude=None):
    """Flattened (predicted, gold) pairs, optionally filtered by ``(doc_id, mention)`` keys."""
    pred, gold = [], []
    for pr in predictions:
        for x, m in enumerate(pr.mentions):
            key = (pr.doc_id, x)
            if subset is not None and key not in subset:
                continue
            if exclude is not None and key in exclude:
                continue
            pred.append(m.predicted)
            gold.append(m.gold)
    return pred, gold


def score(predictions: Sequence[Prediction], subset=None, exclude=None) -> EvalResult:
    pred, gold = select_mentions(predictions, subset, exclude)
    p, r, f = micro_prf(pred, gold)
    return EvalResult(p, r, f, len(gold), list(predictions))


def evaluate(model: EDModel, documents: Sequence[Document], subset=None, exclude=None,
             k: int | None = None) -> EvalResult:
    return score(predict(model, documents, k=k), subset, exclude)


def write_predictions(predictions: Iterable[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pr in predictions:
            fh.write(json.dumps(pr.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- relation analysis


@dataclass(frozen=True)
class RelationRow:
    relation: str
    gold_count: int
    predicted_count: int
    recall: float


def relation_analysis(model: EDModel, documents: Sequence[Document], threshold: float = 0.5) -> list[RelationRow]:
    """Per relation class: gold facts between gold entities of ordered mention
    pairs, pairs whose combined relation score exceeds ``threshold``, and the
    fraction of gold facts also predicted.  Recall is 0 when there is no gold.
    """
    index = model.artifacts.index
    names = model.artifacts.relation_vocab.class_names(model.artifacts.kb)
    n_rel = len(names)
    gold_count = np.zeros(n_rel, dtype=np.int64)
    pred_count = np.zeros(n_rel, dtype=np.int64)
    hit = np.zeros(n_rel, dtype=np.int64)
    for doc in documents:
        out = model.forward(doc, training=False)
        scores = None
        local = {}
        if out.relations is not None:
            scores = out.relations.dense()
            local = {int(m): i for i, m in enumerate(out.layout.mentions)}
            pred_count += (scores > threshold).sum(axis=(0, 1))
        for a, ma in enumerate(doc.mentions):
            for b, mb in enumerate(doc.mentions):
                if a == b or ma.gold is None or mb.gold is None:
                    continue
                bits = np.zeros(n_rel, dtype=bool)
                mask = index.mask(ma.gold, mb.gold)
                for c in range(n_rel):
                    bits[c] = bool(mask >> c & 1)
                gold_count += bits
                if scores is not None and a in local and b in local:
                    hit += bits & (scores[local[a], local[b]] > threshold)
    return [RelationRow(names[c], int(gold_count[c]), int(pred_count[c]),
                        float(hit[c] / gold_count[c]) if gold_count[c] else 0.0)
            for c in range(n_rel)]


def write_analysis(rows: Sequence[RelationRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["relation", "gold", "predicted", "recall"])
        for r in rows:
            w.writerow([r.relation, r.gold_count, r.predicted_count, f"{r.recall:.4f}"])
