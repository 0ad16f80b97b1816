import numpy as np
import pytest

from factlink.encoder import EncoderConfig
from factlink.model import AblationFlags, build_model
from factlink.pipeline import artifacts_from_world
from factlink.relex import RelexConfig
from factlink.world import WorldSpec, generate_world


def tiny_encoder(vocab_size, d_model=16, dropout=0.0):
    return EncoderConfig(vocab_size=vocab_size, d_model=d_model, n_layers=1, n_heads=2, max_seq_len=64,
                         desc_n_layers=1, desc_max_tokens=16, d_ff=2 * d_model, dropout=dropout)


def tiny_model(artifacts, flags=None, seed=0, d_model=16, k=600, re_layers=1):
    enc = tiny_encoder(len(artifacts.vocab), d_model)
    relex = RelexConfig(k=k, n_layers=re_layers, n_heads=2, d_ff=2 * d_model, dropout=0.0)
    return build_model(artifacts, enc, flags=flags or AblationFlags(), relex=relex, task_hidden=d_model,
                       seed=seed)


SMALL_SPEC = WorldSpec(n_entities=60, n_relations=4, n_types=6, n_documents=40, mentions_per_document=4,
                       facts_per_entity=1, seed=11)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_artifacts(small_world):
    return artifacts_from_world(small_world)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
