import pytest

from fedprompt import kernels


@pytest.fixture
def restore_backend():
    """Put the import-time kernel backend back after a test switches it."""
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)
