import numpy as np
import pytest

from factlink import autodiff as ad
from factlink.autodiff import ParameterStore, Tape, Tensor
from factlink.corpus import Vocab
from factlink.encoder import (EncoderConfig, description_ids, encode_description, encode_descriptions,
                              encode_document, init_encoder_params, pool_mention, pool_mentions)
from factlink.errors import ContractError, SpanError

WORDS = [f"w{i}" for i in range(40)]


@pytest.fixture(scope="module")
def setup():
    vocab = Vocab(WORDS)
    cfg = EncoderConfig(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=4, max_seq_len=20,
                        desc_n_layers=1, desc_max_tokens=8, d_ff=32, dropout=0.1)
    store = ParameterStore()
    init_encoder_params(store, cfg, np.random.default_rng(0))
    return vocab, cfg, store


def test_config_contracts():
    with pytest.raises(ContractError):
        EncoderConfig(vocab_size=10, d_model=10, n_heads=4)
    assert EncoderConfig(vocab_size=10).desc_max_tokens == 32


def test_shapes_and_determinism(setup):
    _, cfg, store = setup
    assert encode_document([5], store, cfg).shape == (1, 16)
    for n in (2, 7, 20):
        h = encode_document(list(range(4, 4 + n)), store, cfg)
        assert h.shape == (n, 16) and np.all(np.isfinite(h.data))
    a = encode_document([4, 5, 6, 7], store, cfg).data
    b = encode_document([4, 5, 6, 7], store, cfg).data
    assert np.array_equal(a, b)


def test_positions_matter(setup):
    _, cfg, store = setup
    a = encode_document([4, 5, 6, 7], store, cfg).data
    b = encode_document([5, 4, 6, 7], store, cfg).data
    assert not np.allclose(a, b)


def test_dropout_only_in_training(setup):
    _, cfg, store = setup
    doc = [4, 5, 6, 7]
    a = encode_document(doc, store, cfg, training=True, rng=np.random.default_rng(1)).data
    b = encode_document(doc, store, cfg, training=True, rng=np.random.default_rng(1)).data
    assert np.array_equal(a, b)
    assert not np.allclose(a, encode_document(doc, store, cfg).data)


def test_document_errors(setup):
    _, cfg, store = setup
    with pytest.raises(IndexError):
        encode_document([4, 999], store, cfg)
    with pytest.raises(ValueError, match="max_seq_len"):
        encode_document([4] * 21, store, cfg)
    with pytest.raises(ValueError):
        encode_document([], store, cfg)


def test_pooling_examples():
    H = Tensor(np.array([[0.0, 0.0], [1.0, 3.0], [3.0, 5.0], [9.0, 9.0]]))
    assert np.allclose(pool_mention(H, (1, 3)).data, [2.0, 4.0])
    assert np.array_equal(pool_mention(H, (3, 4)).data, [9.0, 9.0])
    for bad in ((2, 2), (-1, 1), (0, 5), (3, 1)):
        with pytest.raises(SpanError):
            pool_mention(H, bad)


def test_pooling_gradient_is_uniform():
    H = Tensor(np.random.default_rng(0).normal(size=(6, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(pool_mention(H, (1, 5)))
    ad.backward(loss, tape)
    expect = np.zeros((6, 3))
    expect[1:5] = 0.25
    assert np.allclose(H.grad, expect)


def test_pooling_is_linear():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(8, 4))
    spans = [(0, 2), (2, 7), (5, 6)]
    for alpha in (-2.0, 0.5, 3.0):
        assert np.allclose(pool_mentions(Tensor(alpha * H), spans).data, alpha * pool_mentions(Tensor(H), spans).data)


def test_description_sequences(setup):
    vocab, cfg, store = setup
    ids = description_ids(vocab, "w1", "", cfg.desc_max_tokens)
    assert ids == [vocab.cls_id, vocab.index["w1"], vocab.sep_id, vocab.sep_id]
    assert np.all(np.isfinite(encode_description("w1", "", store, cfg, vocab).data))
    a = encode_description("w1", "w2 w3", store, cfg, vocab).data
    assert np.array_equal(a, encode_description("w1", "w2 w3", store, cfg, vocab).data)


def test_long_description_is_truncated(setup):
    vocab, cfg, store = setup
    long = " ".join(WORDS[:20])
    seq = [vocab.cls_id, vocab.index["w1"], vocab.sep_id] + [vocab.index[w] for w in WORDS[:5]]
    manual = encode_descriptions([seq], store, cfg).data[0]
    assert np.allclose(encode_description("w1", long, store, cfg, vocab).data, manual)


def test_batched_descriptions_match_single(setup):
    vocab, cfg, store = setup
    seqs = [description_ids(vocab, "w1", "w2", 8), description_ids(vocab, "w3", "w4 w5 w6 w7", 8)]
    batch = encode_descriptions(seqs, store, cfg).data
    for row, s in zip(batch, seqs):
        assert np.allclose(row, encode_descriptions([s], store, cfg).data[0], atol=1e-12)
