import pytest

from factlink import gradcheck
from factlink.model import AblationFlags, ablate


def test_every_parameter_belongs_to_a_group():
    model, _ = gradcheck.fixture()
    groups = {gradcheck.module_of(n) for n in model.store.names()}
    assert groups == set(gradcheck.MODULES)


@pytest.mark.parametrize("variant", ["bilinear", "signed-relation-scores", "no-task-hidden"])
def test_variants_pass(variant):
    flags = ablate(AblationFlags(), [variant])
    report = gradcheck.run("all", flags=flags, coords_per_param=8)
    assert report["passed"], report["max_relative_error"]


def test_module_filter():
    report = gradcheck.run("scoring", coords_per_param=4)
    assert set(report["per_parameter"]) == {n for n in report["per_parameter"] if gradcheck.module_of(n) == "scoring"}
    assert report["per_parameter"] and report["passed"]
