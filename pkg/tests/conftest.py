import numpy as np
import pytest
import torch

from deynet.data import PhantomSpec, Volume, phantom_domain
from deynet.network import ArchSpec
from deynet.training import set_deterministic


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(True)
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchSpec(depth=2, base_channels=4)


@pytest.fixture
def small_arch():
    return ArchSpec(depth=3, base_channels=8)


@pytest.fixture(scope="session")
def phantoms():
    """Small preprocessed source-domain phantoms: 4 labeled + 2 unlabeled + 2 test."""
    spec = PhantomSpec(organ_count=2, noise_sigma=0.02, shape=(16, 32, 32))
    vols = phantom_domain(8, spec, seed0=100, domain_tag="src")
    return {"labeled": vols[:4], "unlabeled": vols[4:6], "test": vols[6:]}


def make_volume(n_slices, h, w, seed, labeled=True, vid=None, tag="t"):
    g = np.random.default_rng(seed)
    vox = g.random((n_slices, h, w)).astype(np.float32)
    lab = (g.random((n_slices, h, w)) > 0.6).astype(np.uint8) if labeled else None
    return Volume(voxels=vox, label=lab, id=vid or f"v{seed}", domain_tag=tag)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
