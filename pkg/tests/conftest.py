import numpy as np
import pytest
import torch

from ssda.config import Trial


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_trials(subjects=3, per_subject=4, C=4, T=40, K=2, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(subjects):
        for i in range(per_subject):
            out.append(Trial(f"S{s}", f"S{s}/r/{i}", rng.standard_normal((C, T)).astype(np.float32), i % K, K))
    return out


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
