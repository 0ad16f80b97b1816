"""Document encoder, mention pooling and the description bi-encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .corpus import Vocab
from .errors import ContractError, SpanError
from .layers import NEG_INF, block, init_block, init_layer_norm, layer_norm


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    desc_n_layers: int = 2
    desc_max_tokens: int = 32
    d_ff: int = 128
    dropout: float = 0.05

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ContractError("d_model must be even (pair embeddings halve it)")

    def to_dict(self) -> dict:
        return asdict(self)


def _init_stack(store, prefix, cfg: EncoderConfig, n_layers, max_len, rng, final_bias=True):
    store.add(f"{prefix}.tok", rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.d_model)))
    store.add(f"{prefix}.pos", rng.normal(0.0, 0.5, size=(max_len, cfg.d_model)))
    for i in range(n_layers):
        init_block(store, f"{prefix}.l{i}", cfg.d_model, cfg.d_ff, rng)
    init_layer_norm(store, f"{prefix}.lnf", cfg.d_model, bias=final_bias)


def init_encoder_params(store: ParameterStore, cfg: EncoderConfig, rng) -> None:
    _init_stack(store, "enc", cfg, cfg.n_layers, cfg.max_seq_len, rng)
    # a shared offset on every description embedding cancels in the per-mention softmax
    _init_stack(store, "desc", cfg, cfg.desc_n_layers, cfg.desc_max_tokens, rng, final_bias=False)


def _run_stack(ids: np.ndarray, store, prefix, cfg, n_layers, bias=None, training=False, rng=None):
    x = ad.take(store[f"{prefix}.tok"], ids)
    length = ids.shape[-1]
    x = ad.add(x, store[f"{prefix}.pos"][:length])
    x = ad.dropout(x, cfg.dropout, rng, training)
    for i in range(n_layers):
        x = block(x, store, f"{prefix}.l{i}", cfg.n_heads, bias=bias,
                  dropout=cfg.dropout, training=training, rng=rng)
    return layer_norm(x, store, f"{prefix}.lnf")


def encode_document(tokens: Sequence[int], store: ParameterStore, cfg: EncoderConfig,
                    training: bool = False, rng=None) -> Tensor:
    """Contextual token embeddings ``[N, d_model]`` for one document."""
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.ndim != 1 or len(ids) == 0:
        raise ValueError("document must contain at least one token")
    if len(ids) > cfg.max_seq_len:
        raise ValueError(f"document length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise IndexError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    return _run_stack(ids, store, "enc", cfg, cfg.n_layers, training=training, rng=rng)


def pooling_matrix(spans: Sequence[tuple[int, int]], n_tokens: int) -> np.ndarray:
    pool = np.zeros((len(spans), n_tokens))
    for row, (start, end) in enumerate(spans):
        if not 0 <= start < end <= n_tokens:
            raise SpanError(f"span ({start}, {end}) is empty or outside [0, {n_tokens}]")
        pool[row, start:end] = 1.0 / (end - start)
    return pool


def pool_mentions(H: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
    """Average-pooled mention embeddings ``[M, d_model]``."""
    return ad.matmul(pooling_matrix(spans, H.shape[0]), H)


def pool_mention(H: Tensor, span: tuple[int, int]) -> Tensor:
    return ad.reshape(pool_mentions(H, [span]), (H.shape[1],))


def description_ids(vocab: Vocab, label: str, description: str, max_tokens: int) -> list[int]:
    """``[CLS] label [SEP] description [SEP]``, cut to ``max_tokens``."""
    seq = [vocab.cls_id, *vocab.encode(label), vocab.sep_id, *vocab.encode(description), vocab.sep_id]
    return seq[:max_tokens]


def encode_descriptions(seqs: Sequence[Sequence[int]], store: ParameterStore, cfg: EncoderConfig,
                        training: bool = False, rng=None) -> Tensor:
    """First-position outputs of the description encoder, one row per sequence."""
    if not seqs:
        return Tensor(np.zeros((0, cfg.d_model)))
    width = max(len(s) for s in seqs)
    if width > cfg.desc_max_tokens:
        raise ValueError(f"description sequence longer than {cfg.desc_max_tokens}")
    ids = np.zeros((len(seqs), width), dtype=np.intp)
    bias = np.zeros((len(seqs), 1, 1, width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        bias[i, 0, 0, len(s):] = NEG_INF
    out = _run_stack(ids, store, "desc", cfg, cfg.desc_n_layers, bias=bias, training=training, rng=rng)
    return out[:, 0, :]


def encode_description(label: str, description: str, store: ParameterStore, cfg: EncoderConfig,
                       vocab: Vocab) -> Tensor:
    seq = description_ids(vocab, label, description, cfg.desc_max_tokens)
    return ad.reshape(encode_descriptions([seq], store, cfg), (cfg.d_model,))
