"""Parameter initialisers and layer forwards shared by the encoders and heads."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

NEG_INF = -1e9


def init_linear(store: ParameterStore, prefix: str, d_in: int, d_out: int, rng, gain: float = 1.0,
                bias: bool = True):
    store.add(f"{prefix}.w", rng.normal(0.0, gain / np.sqrt(max(d_in, 1)), size=(d_in, d_out)))
    if bias:
        store.add(f"{prefix}.b", np.zeros(d_out))


def linear(x, store: ParameterStore, prefix: str) -> Tensor:
    y = ad.matmul(x, store[f"{prefix}.w"])
    if f"{prefix}.b" in store:
        y = ad.add(y, store[f"{prefix}.b"])
    return y


def init_layer_norm(store: ParameterStore, prefix: str, d: int, bias: bool = True):
    store.add(f"{prefix}.g", np.ones(d))
    if bias:
        store.add(f"{prefix}.b", np.zeros(d))


def layer_norm(x, store: ParameterStore, prefix: str) -> Tensor:
    g = store[f"{prefix}.g"]
    b = store[f"{prefix}.b"] if f"{prefix}.b" in store else np.zeros(g.shape)
    return ad.layer_norm(x, g, b)


def init_head(store, prefix, d_in, d_out, hidden: int | None, rng):
    """Task head: optional tanh hidden layer followed by a linear output map."""
    if hidden:
        init_linear(store, f"{prefix}.hid", d_in, hidden, rng)
        init_linear(store, f"{prefix}.out", hidden, d_out, rng)
    else:
        init_linear(store, f"{prefix}.out", d_in, d_out, rng)


def head(x, store, prefix) -> Tensor:
    if f"{prefix}.hid.w" in store:
        x = ad.tanh(linear(x, store, f"{prefix}.hid"))
    return linear(x, store, f"{prefix}.out")


def init_attention(store, prefix, d, rng):
    # a key bias only shifts each query's scores by a constant, so it is left out
    for part in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{part}", d, d, rng, bias=part != "k")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = ad.reshape(x, (*lead, length, n_heads, d // n_heads))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swapaxes(x, -3, -2)
    *lead, length, h, dh = x.shape
    return ad.reshape(x, (*lead, length, h * dh))


def multi_head_attention(x, memory, store, prefix, n_heads, bias=None) -> Tensor:
    q = _split_heads(linear(x, store, f"{prefix}.q"), n_heads)
    k = _split_heads(linear(memory, store, f"{prefix}.k"), n_heads)
    v = _split_heads(linear(memory, store, f"{prefix}.v"), n_heads)
    return linear(_merge_heads(ad.attention(q, k, v, bias)), store, f"{prefix}.o")


def init_block(store, prefix, d, d_ff, rng, cross: bool = False):
    init_layer_norm(store, f"{prefix}.ln1", d)
    init_attention(store, f"{prefix}.att", d, rng)
    if cross:
        init_layer_norm(store, f"{prefix}.ln2", d)
        init_attention(store, f"{prefix}.xatt", d, rng)
    init_layer_norm(store, f"{prefix}.ln3", d)
    init_linear(store, f"{prefix}.ff1", d, d_ff, rng)
    init_linear(store, f"{prefix}.ff2", d_ff, d, rng)


def block(x, store, prefix, n_heads, *, bias=None, memory=None, memory_bias=None,
          dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Pre-norm transformer block; with ``memory`` it adds a cross-attention sublayer."""
    h = layer_norm(x, store, f"{prefix}.ln1")
    h = multi_head_attention(h, h, store, f"{prefix}.att", n_heads, bias)
    x = ad.add(x, ad.dropout(h, dropout, rng, training))
    if memory is not None:
        h = layer_norm(x, store, f"{prefix}.ln2")
        h = multi_head_attention(h, memory, store, f"{prefix}.xatt", n_heads, memory_bias)
        x = ad.add(x, ad.dropout(h, dropout, rng, training))
    h = layer_norm(x, store, f"{prefix}.ln3")
    h = linear(ad.gelu(linear(h, store, f"{prefix}.ff1")), store, f"{prefix}.ff2")
    return ad.add(x, ad.dropout(h, dropout, rng, training))
