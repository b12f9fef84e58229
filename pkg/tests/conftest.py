import pytest
from typer.testing import CliRunner

from harmap import config
from harmap.maps import GeometryMap
from harmap.samples import sample
from harmap.topology import MultipatchSpace


@pytest.fixture
def cli_runner():
    return CliRunner()


@pytest.fixture
def no_cache(monkeypatch):
    monkeypatch.setattr(config, "ENABLE_EVAL_CACHE", False)


@pytest.fixture
def make_space():
    def _make_space(name, degree=2, refine=1):
        q, F = sample(name)
        return MultipatchSpace.from_degree(q, degree, refine), F

    return _make_space


@pytest.fixture
def identity_map(make_space):
    def _identity_map(name="square", degree=2, refine=1):
        space, _ = make_space(name, degree, refine)
        return GeometryMap.identity(space)

    return _identity_map
