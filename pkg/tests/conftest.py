import pytest

from xsep.data import build_dataset


@pytest.fixture(scope="session")
def default_manifest(tmp_path_factory):
    """The default 30/5/10 synthetic dataset, generated once per session."""
    return build_dataset(tmp_path_factory.mktemp("default_ds"))
