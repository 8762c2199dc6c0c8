import pytest

from routegame.cli import bundled_config_text
from routegame.network import parse_config


@pytest.fixture(scope="session")
def braess_two():
    return parse_config(bundled_config_text("braess_two"))


@pytest.fixture(scope="session")
def braess_single():
    return parse_config(bundled_config_text("braess_single"))


@pytest.fixture(scope="session")
def simple_due():
    return parse_config(bundled_config_text("simple_due"))


@pytest.fixture(scope="session")
def simple_spillback():
    return parse_config(bundled_config_text("simple_spillback"))


@pytest.fixture(scope="session")
def ow():
    return parse_config(bundled_config_text("ow"))
