import json
import math

import numpy as np
import pytest

from factlink import autodiff as ad
from factlink.autodiff import Tensor
from factlink.candidates import CandidateSet
from factlink.corpus import Document, Mention
from factlink.errors import NumericError, ValidationError
from factlink.gradcheck import fixture
from factlink.model import AblationFlags, DocOutput, init_params
from factlink.scoring import CandidateLayout
from factlink.training import (Adam, TrainConfig, ed_loss, load_model, subsample, train, training_config_for,
                               window)
from factlink.world import WorldSpec, generate_world
from factlink.pipeline import artifacts_from_world

from conftest import tiny_model


def output_for(sets, golds, psi_f):
    layout = CandidateLayout(sets, golds)
    z = Tensor(np.zeros(layout.n_flat))
    return DocOutput(layout, z, z, z, z, z, z, z, Tensor(np.asarray(psi_f, dtype=float)))


def cs(i, ents):
    return CandidateSet(i, tuple((e, 1.0 / len(ents)) for e in ents))


def test_uniform_loss_is_ln2():
    out = output_for([cs(0, [1, 2]), cs(1, [3, 4])], [1, 4], [0.3, 0.3, -1.0, -1.0])
    res = ed_loss([out])
    assert res.loss.item() == pytest.approx(math.log(2)) and res.n_mentions == 2


def test_mixed_batch_hand_computed():
    # mention 2 is masked (gold 9 is not a candidate)
    a = output_for([cs(0, [1, 2, 3]), cs(1, [4]), cs(2, [5, 6])], [2, 4, 9], [1.0, 2.0, 0.5, 7.0, 0.0, 3.0])
    b = output_for([cs(0, [7, 8])], [7], [-1.0, 1.0])
    terms = [
        -(2.0 - np.log(np.exp(1.0) + np.exp(2.0) + np.exp(0.5))),
        0.0,
        -(-1.0 - np.log(np.exp(-1.0) + np.exp(1.0))),
    ]
    res = ed_loss([a, b])
    assert res.n_mentions == 3
    assert res.loss.item() == pytest.approx(sum(terms) / 3, abs=1e-12)
    assert res.per_document[0] == pytest.approx(sum(terms[:2]) / 2)


def test_perfect_and_masked_losses():
    out = output_for([cs(0, [1, 2])], [1], [500.0, 0.0])
    assert ed_loss([out]).loss.item() < 1e-12
    res = ed_loss([output_for([cs(0, [1, 2])], [3], [0.0, 0.0])])
    assert res.all_masked and res.loss.item() == 0.0 and res.n_mentions == 0


def doc_with(n_mentions, gold=0):
    return Document("d", tuple(range(n_mentions)), tuple(Mention(i, i + 1, "x", gold) for i in range(n_mentions)))


def test_subsample_mentions():
    config = TrainConfig()
    doc = doc_with(5)
    sets = [cs(i, [0, 1]) for i in range(5)]
    assert subsample(doc, sets, config, np.random.default_rng(0)).mention_indices == list(range(5))
    doc = doc_with(40)
    sets = [cs(i, [0, 1]) for i in range(40)]
    a = subsample(doc, sets, config, np.random.default_rng(3)).mention_indices
    b = subsample(doc, sets, config, np.random.default_rng(3)).mention_indices
    assert a == b and len(a) == 30 and len(set(a)) == 30


def test_subsample_candidates_enumerates_negatives():
    config = TrainConfig()
    doc = doc_with(1, gold=13)
    sets = [cs(0, [10, 11, 12, 13, 14, 15, 16, 17])]
    seen = set()
    for seed in range(200):
        view = subsample(doc, sets, config, np.random.default_rng(seed))
        ents = view.candidate_sets[0].entity_ids
        assert len(ents) == 5 and 13 in ents and len(set(ents)) == 5
        assert ents == sorted(ents)  # original candidate order is kept
        seen.update(ents)
    assert seen == {10, 11, 12, 13, 14, 15, 16, 17}


def test_window_drops_crossing_mentions():
    doc = Document("w", tuple(range(10)), (Mention(0, 2, "a", 1), Mention(4, 5, "b", 2), Mention(8, 10, "c", 3)))
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = window(doc, 6, rng)
        assert len(w.tokens) == 6
        for m in w.mentions:
            assert 0 <= m.start < m.end <= 6
    assert window(doc, 10, rng) is doc


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(max_steps=-1)


def test_adam_schedule_and_first_step():
    store = ad.ParameterStore()
    p = store.add("p", np.array([1.0, -2.0]))
    opt = Adam(store, 0.1, 10)
    assert opt.learning_rate(0) == 0.1 and opt.learning_rate(5) == pytest.approx(0.05)
    assert opt.learning_rate(10) == 0.0
    p.grad = np.array([4.0, -0.5])
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-8)
    frozen = Adam(store, 0.1, 10, frozen=["p"])
    before = p.data.copy()
    frozen.step()
    assert np.array_equal(p.data, before)


def test_masked_mention_has_no_influence():
    model, doc = fixture()
    grads = []
    for absent in (0, 1):  # gold ids that are never candidates of "bo"
        mentions = list(doc.mentions)
        mentions[1] = Mention(4, 5, "bo", absent)
        d = Document(doc.id, doc.tokens, tuple(mentions))
        with ad.Tape() as tape:
            out = model.forward(d, training=False)
            res = ed_loss([out])
        assert res.n_mentions == 2
        model.store.zero_grad()
        ad.backward(res.loss, tape)
        grads.append({n: t.grad.copy() for n, t in model.store.items()})
        # same gradient as the loss written over the two unmasked rows only
        with ad.Tape() as tape:
            out = model.forward(d, training=False)
            rows = out.layout.gold_flat[[0, 2]]
            logp = ad.segment_log_softmax(out.psi_f, out.layout.segment, out.layout.n_mentions)
            manual = ad.mul(ad.neg(ad.tsum(ad.take(logp, rows))), 0.5)
        model.store.zero_grad()
        ad.backward(manual, tape)
        for n, t in model.store.items():
            assert np.array_equal(t.grad, grads[-1][n]), n
    for n in grads[0]:
        assert np.array_equal(grads[0][n], grads[1][n])


def test_relation_module_receives_gradient():
    model, doc = fixture()
    with ad.Tape() as tape:
        out = model.forward(doc, training=False)
        res = ed_loss([out])
    model.store.zero_grad()
    ad.backward(res.loss, tape)
    assert len(out.relations.kept_pairs) == 6
    re_params = [n for n in model.store.names() if n.startswith("re.")]
    assert re_params and all(np.abs(model.store[n].grad).max() > 0 for n in ("re.B.w", "re.ff3.w", "re.ff4.w"))
    assert sum(np.abs(model.store[n].grad).sum() for n in re_params if ".tr." in n) > 0


@pytest.fixture(scope="module")
def world50():
    world = generate_world(WorldSpec(n_entities=60, n_relations=4, n_types=6, n_documents=50,
                                     mentions_per_document=4, facts_per_entity=1, seed=5))
    return world, artifacts_from_world(world)


def test_zero_steps_keeps_initialisation(world50, tmp_path):
    world, art = world50
    mc = tiny_model(art).config
    config = TrainConfig(max_steps=0, seed=3)
    res = train(config, art, world.splits["train"], model_config=mc, out_dir=tmp_path)
    init = init_params(training_config_for(mc, config))
    for name, t in init.items():
        assert np.array_equal(res.model.store[name].data, t.data)
    again = load_model(res.checkpoint, art)
    assert all(np.array_equal(again.store[n].data, t.data) for n, t in init.items())


def test_loss_decreases_and_logs(world50, tmp_path):
    world, art = world50
    mc = tiny_model(art).config
    config = TrainConfig(max_steps=200, eval_every=50, learning_rate=3e-3, dropout=0.0, seed=1)
    res = train(config, art, world.splits["train"], world.splits["dev"], model_config=mc, out_dir=tmp_path)
    losses = [m["loss"] for m in res.metrics]
    assert [m["step"] for m in res.metrics] == [50, 100, 150, 200]
    assert losses[-1] < losses[0]
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"step", "loss", "dev_f1"} and 0.0 <= rows[-1]["dev_f1"] <= 1.0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["train"]["max_steps"] == 200 and cfg["train"]["max_mentions_per_window"] == 30


def test_no_kb_freezes_kb_weights(world50):
    world, art = world50
    mc = tiny_model(art, flags=AblationFlags(use_kb=False)).config
    res = train(TrainConfig(max_steps=5, seed=2), art, world.splits["train"], model_config=mc)
    assert res.model.store["w3"].item() == 0.0 and res.model.store["w4"].item() == 0.0
    out = res.model.forward(world.splits["dev"][0])
    assert out.facts is None and out.relations is None


def test_identical_runs_write_identical_checkpoints(world50, tmp_path):
    world, art = world50
    mc = tiny_model(art).config
    config = TrainConfig(max_steps=6, batch_size=4, seed=4)
    a = train(config, art, world.splits["train"], model_config=mc, out_dir=tmp_path / "a")
    b = train(config, art, world.splits["train"], model_config=mc, out_dir=tmp_path / "b")
    assert a.checkpoint_sha256 == b.checkpoint_sha256
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_non_finite_loss_aborts_with_dump(world50, tmp_path, monkeypatch):
    import factlink.training as training
    world, art = world50
    real = training.ed_loss

    def poisoned(outputs):
        res = real(outputs)
        res.per_document[0] = float("nan")
        return training.LossResult(ad.mul(res.loss, float("nan")), res.n_mentions, False, res.per_document)

    monkeypatch.setattr(training, "ed_loss", poisoned)
    with pytest.raises(NumericError, match="non-finite"):
        train(TrainConfig(max_steps=3), art, world.splits["train"], model_config=tiny_model(art).config,
              out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite.json").read_text())
    assert dump["step"] == 1 and len(dump["documents"]) == 1
