"""Cross-entropy training over candidate sets.

Mentions and candidates are subsampled per document, the gold is always
kept, and mentions whose gold is missing from the candidates are masked out
of the loss.  Parameters are updated with Adam under a linear decay to zero.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .candidates import CandidateSet
from .corpus import Document, Mention
from .errors import NumericError, ValidationError
from .model import DescriptionTable, DocOutput, EDModel, KBArtifacts, ModelConfig, build_model

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_steps: int = 1000
    max_seq_len: int = 256
    dropout: float = 0.05
    max_mentions_per_window: int = 30
    max_candidates_train: int = 5
    seed: int = 0
    eval_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_seq_len", "max_mentions_per_window",
                     "max_candidates_train", "eps"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.max_steps < 0 or self.eval_every < 0 or self.seed < 0:
            raise ValidationError("max_steps, eval_every and seed must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingView:
    mention_indices: list[int]
    candidate_sets: list[CandidateSet]


def subsample(document: Document, candidate_sets: Sequence[CandidateSet], config: TrainConfig,
              rng: np.random.Generator) -> TrainingView:
    """Uniform mention sample, then gold plus uniformly drawn negatives per mention."""
    n = len(candidate_sets)
    cap = config.max_mentions_per_window
    if n > cap:
        chosen = np.sort(rng.choice(n, size=cap, replace=False)).tolist()
    else:
        chosen = list(range(n))
    reduced = []
    for x in chosen:
        cs = candidate_sets[x]
        gold = document.mentions[cs.mention_index].gold
        rows = cs.candidates
        limit = config.max_candidates_train
        if len(rows) > limit:
            gold_pos = [k for k, (e, _) in enumerate(rows) if e == gold]
            negatives = [k for k in range(len(rows)) if k not in gold_pos]
            take = limit - len(gold_pos)
            picked = rng.choice(len(negatives), size=take, replace=False) if take else []
            keep = sorted(gold_pos + [negatives[p] for p in picked])
            rows = tuple(rows[k] for k in keep)
        reduced.append(CandidateSet(cs.mention_index, rows, cs.gold_present))
    return TrainingView([candidate_sets[x].mention_index for x in chosen], reduced)


def window(document: Document, max_len: int, rng: np.random.Generator) -> Document:
    """A random ``max_len`` token window; mentions crossing its edges are dropped."""
    if len(document.tokens) <= max_len:
        return document
    start = int(rng.integers(0, len(document.tokens) - max_len + 1))
    end = start + max_len
    mentions = tuple(Mention(m.start - start, m.end - start, m.surface, m.gold)
                     for m in document.mentions if m.start >= start and m.end <= end)
    return Document(document.id, document.tokens[start:end], mentions)


@dataclass
class LossResult:
    loss: Tensor
    n_mentions: int
    all_masked: bool
    per_document: list[float] = field(default_factory=list)


def mention_cross_entropy(scores: Tensor, segment: np.ndarray, n_segments: int,
                          gold_rows: np.ndarray) -> Tensor:
    """Summed cross-entropy of the gold rows under per-segment softmax."""
    logp = ad.segment_log_softmax(scores, segment, n_segments)
    return ad.neg(ad.tsum(ad.take(logp, gold_rows)))


def ed_loss(outputs: Sequence[DocOutput]) -> LossResult:
    """Mean cross-entropy over mentions whose gold is among their candidates."""
    total = None
    count = 0
    per_doc = []
    for out in outputs:
        gold = out.layout.gold_flat
        rows = gold[gold >= 0]
        if len(rows) == 0:
            per_doc.append(0.0)
            continue
        part = mention_cross_entropy(out.psi_f, out.layout.segment, out.layout.n_mentions, rows)
        per_doc.append(float(part.data) / len(rows))
        total = part if total is None else ad.add(total, part)
        count += len(rows)
    if count == 0:
        return LossResult(Tensor(np.array(0.0)), 0, True, per_doc)
    return LossResult(ad.mul(total, 1.0 / count), count, False, per_doc)


class Adam:
    """Adam with a learning rate decaying linearly from its start value to 0."""

    def __init__(self, store, learning_rate: float, total_steps: int, beta1=0.9, beta2=0.999,
                 eps=1e-8, frozen: Sequence[str] = ()):
        self.store = store
        self.lr0 = learning_rate
        self.total = max(total_steps, 1)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.frozen = set(frozen)
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.t = 0

    def learning_rate(self, step: int) -> float:
        return self.lr0 * (1.0 - step / self.total)

    def step(self) -> float:
        lr = self.learning_rate(self.t)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.store.items():
            if name in self.frozen or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


@dataclass
class TrainResult:
    model: EDModel
    metrics: list[dict]
    checkpoint: Path | None = None
    checkpoint_sha256: str | None = None


def training_config_for(model_config: ModelConfig, config: TrainConfig) -> ModelConfig:
    """Model config with the run's dropout, sequence length and seed applied."""
    enc = replace(model_config.encoder, dropout=config.dropout,
                  max_seq_len=max(model_config.encoder.max_seq_len, config.max_seq_len))
    return replace(model_config, encoder=enc, relex=replace(model_config.relex, dropout=config.dropout),
                   seed=config.seed)


def batch_forward(model: EDModel, docs: Sequence[Document], config: TrainConfig, rng) -> list[DocOutput]:
    views = []
    for doc in docs:
        doc = window(doc, config.max_seq_len, rng)
        view = subsample(doc, model.candidates(doc), config, rng)
        views.append((doc, view))
    descriptions = None
    if model.flags.use_descriptions:
        ents = {e for _, v in views for cs in v.candidate_sets for e in cs.entity_ids}
        if ents:
            descriptions = DescriptionTable(model, ents, training=True, rng=rng)
    return [model.forward(doc, view.candidate_sets, training=True, rng=rng, descriptions=descriptions)
            for doc, view in views]


def train(config: TrainConfig, artifacts: KBArtifacts, train_docs: Sequence[Document],
          dev_docs: Sequence[Document] | None = None, *, model_config: ModelConfig | None = None,
          out_dir=None, evaluate_fn=None) -> TrainResult:
    """Run ``config.max_steps`` optimiser steps and write the checkpoint.

    ``evaluate_fn(model, docs) -> float`` computes the dev score; it defaults
    to micro-F1 from :mod:`factlink.evaluation`.
    """
    if not train_docs:
        raise ValidationError("empty training set")
    if model_config is None:
        model_config = build_model(artifacts).config
    model_config = training_config_for(model_config, config)
    model = EDModel(model_config, artifacts)
    frozen = [] if model.flags.use_kb else ["w3", "w4"]
    opt = Adam(model.store, config.learning_rate, config.max_steps, config.beta1, config.beta2,
               config.eps, frozen=frozen)
    if evaluate_fn is None:
        from .evaluation import evaluate

        def evaluate_fn(m, docs):
            return evaluate(m, docs).f1

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump({"train": config.to_dict(), "model": model_config.to_dict()}, fh, indent=1, sort_keys=True)
            fh.write("\n")
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None

    rng = np.random.default_rng(config.seed)
    order = np.zeros(0, dtype=np.intp)
    cursor = 0
    metrics: list[dict] = []
    window_losses: list[float] = []
    try:
        for step in range(1, config.max_steps + 1):
            if cursor + config.batch_size > len(order):
                order = np.concatenate([order[cursor:], rng.permutation(len(train_docs))])
                cursor = 0
            batch = [train_docs[i] for i in order[cursor:cursor + config.batch_size]]
            cursor += config.batch_size

            with ad.Tape() as tape:
                outputs = batch_forward(model, batch, config, rng)
                result = ed_loss(outputs)
                if not np.isfinite(result.loss.data):
                    bad = [d.id for d, v in zip(batch, result.per_document) if not np.isfinite(v)]
                    _dump_nonfinite(out, step, bad, result.per_document, batch)
                    raise NumericError(f"non-finite loss at step {step}; documents {bad}")
                if not result.all_masked:
                    model.store.zero_grad()
                    ad.backward(result.loss, tape)
                    opt.step()
                else:
                    opt.t += 1
            window_losses.append(float(result.loss.data))

            last = step == config.max_steps
            if (config.eval_every and step % config.eval_every == 0) or last:
                rec = {"step": step, "loss": float(np.mean(window_losses)), "dev_f1": None}
                if dev_docs:
                    rec["dev_f1"] = float(evaluate_fn(model, dev_docs))
                window_losses = []
                metrics.append(rec)
                log.info("step %d loss %.4f dev_f1 %s", step, rec["loss"], rec["dev_f1"])
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    model.store.zero_grad()
    result = TrainResult(model, metrics)
    if out is not None:
        path = out / CHECKPOINT_NAME
        meta = {"model": model_config.to_dict(), "train": config.to_dict()}
        result.checkpoint = path
        result.checkpoint_sha256 = ad.save_checkpoint(path, model.store, meta)
    return result


def _dump_nonfinite(out: Path | None, step: int, bad_ids, losses, batch):
    record = {"step": step, "documents": bad_ids,
              "losses": {d.id: repr(v) for d, v in zip(batch, losses)}}
    log.error("non-finite loss: %s", record)
    if out is not None:
        with open(out / "nonfinite.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=1)


def load_model(checkpoint, artifacts: KBArtifacts) -> EDModel:
    store, meta = ad.load_checkpoint(checkpoint)
    config = ModelConfig.from_dict(meta["model"])
    return EDModel(config, artifacts, store)
