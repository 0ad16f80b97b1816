import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from factlink.autodiff import ParameterStore, Tensor
from factlink.errors import ContractError, ShapeError
from factlink.scoring import (description_score, init_scoring_params, initial_score, normalize_scores,
                              type_logits, type_score, type_scores)


def linear_store(d_model=2, n_types=4):
    store = ParameterStore()
    init_scoring_params(store, d_model, n_types, None, np.random.default_rng(0))
    return store


def test_type_score_hand_example():
    store = linear_store(d_model=4, n_types=4)
    store["ff1.out.w"].data[...] = np.eye(4)
    store["ff1.out.b"].data[...] = 0.0
    psi = type_score(Tensor(np.array([0.5, -1.0, 2.0, 0.0])), [1, 0, 1, 0], 0.3, store)
    assert psi.item() == pytest.approx(2.8, abs=1e-12)


def test_type_score_degenerate_cases():
    store = linear_store(d_model=4, n_types=4)
    m = Tensor(np.array([0.3, 0.1, -2.0, 1.0]))
    assert type_score(m, [0, 0, 0, 0], 0.7, store).item() == 0.7
    store["ff1.out.w"].data[...] = 0.0
    store["ff1.out.b"].data[...] = 0.0
    assert type_score(m, [1, 1, 0, 1], 0.2, store).item() == 0.2
    with pytest.raises(ShapeError):
        type_score(m, [1, 0, 1], 0.2, store)


def test_hidden_head_is_used():
    store = ParameterStore()
    init_scoring_params(store, 4, 3, 5, np.random.default_rng(0))
    assert "ff1.hid.w" in store and store["ff1.out.w"].shape == (5, 3)
    logits = type_logits(Tensor(np.ones((1, 4))), store)
    assert logits.shape == (1, 3)
    psi = type_scores(logits, np.zeros(1, dtype=np.intp), np.ones((1, 3)), None)
    assert psi.item() == pytest.approx(logits.data.sum())


def test_description_score_examples():
    store = linear_store(d_model=2)
    store["ff2.out.w"].data[...] = np.eye(2)
    store["ff2.out.b"].data[...] = 0.0
    m = Tensor(np.array([1.0, 2.0]))
    assert description_score(m, np.array([3.0, -1.0]), store).item() == pytest.approx(1.0)
    assert description_score(m, np.zeros(2), store).item() == 0.0
    rng = np.random.default_rng(1)
    store["ff2.out.w"].data[...] = rng.normal(size=(2, 2))
    d = rng.normal(size=2)
    for c in (-1.5, 0.0, 4.0):
        assert description_score(m, c * d, store).item() == pytest.approx(c * description_score(m, d, store).item())
    with pytest.raises(ShapeError):
        description_score(m, np.zeros(3), store)


def test_initial_score_examples():
    store = linear_store()
    assert store["w1"].item() == 1.0 and store["w2"].item() == 1.0
    store["w1"].data[...] = 0.5
    store["w2"].data[...] = 0.5
    assert initial_score(2.0, 4.0, store).item() == 3.0
    store["w1"].data[...] = 1.0
    store["w2"].data[...] = 0.0
    assert initial_score(-1.25, 9.0, store).item() == -1.25


def test_normalize_examples():
    assert normalize_scores(np.array([3.0])).data.tolist() == [1.0]
    assert np.allclose(normalize_scores(np.full(4, 0.7)).data, 0.25)
    assert np.allclose(normalize_scores(np.array([0.0, np.log(3.0)])).data, [0.25, 0.75])
    with pytest.raises(ContractError):
        normalize_scores(np.zeros(0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-100, 100), st.integers(1, 4))
def test_segment_softmax_properties(scores, shift, n_seg):
    x = np.array(scores)
    seg = np.arange(len(x)) % n_seg
    n = int(seg.max()) + 1
    p = normalize_scores(x, seg, n).data
    assert np.all(np.isfinite(p))
    sums = np.bincount(seg, weights=p, minlength=n)
    assert np.allclose(sums, 1.0, atol=1e-9)
    shifted = normalize_scores(x + shift * (seg == 0), seg, n).data
    assert np.allclose(shifted, p, atol=1e-9)
