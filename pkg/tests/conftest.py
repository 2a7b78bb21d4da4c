import pytest
import torch


@pytest.fixture(autouse=True, scope="session")
def _thread_cap():
    # single-threaded math kernels: reproducible and fastest on small shapes
    torch.set_num_threads(1)
