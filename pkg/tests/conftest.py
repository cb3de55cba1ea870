import numpy as np
import pytest

from cattransfer.config import TrainConfig
from cattransfer.synthetic import WorldConfig, gen_bundle, gen_world

SMALL = dict(c_f=5, c_w=4, n_overlap=2, n_relations=1, d_p=8, k=6, r_min=4, r_max=8,
             max_objects=3, d=8, hidden1=6, hidden2=8, n_full_train=12, n_full_test=4,
             n_weak_train=16, n_weak_test=6, batch_full=3, batch_weak=3, steps=6,
             eval_every=3)


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="session")
def small_bundle(small_cfg):
    world = gen_world(small_cfg.world_config(), small_cfg.seed)
    return gen_bundle(world, small_cfg.sizes, small_cfg.seed)


@pytest.fixture(scope="session")
def ref_world():
    return gen_world(WorldConfig(), 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion for the summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
