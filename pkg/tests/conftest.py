import numpy as np
import pytest
import torch

from bridgeseg.training import TrainConfig

TINY = dict(epochs=1, n_res_blocks=1, gen_base_channels=8, disc_base_channels=8,
            seg_base_channels=4, seg_depth=2, nce_patches=16, checkpoint_every=1)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# acceptance results: criterion -> list of (part, ok, detail)
_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def record_criterion():
    def record(number, ok, detail="", part=""):
        _ACCEPTANCE.setdefault(number, []).append((part, bool(ok), detail))
        print(f"criterion {number}{part}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{part + ': ' if part else ''}{'ok' if good else 'FAILED'} {d}".strip()
                           for part, good, d in parts)
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
