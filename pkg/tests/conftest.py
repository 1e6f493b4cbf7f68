import numpy as np
import pytest

from dropseg.volgrid import BinaryMask, MultiSequenceStudy, SequenceId, Volume3D


def make_study(dims=(8, 6, 10), seqs=tuple(SequenceId), seed=0, case_id="c0", gt=True):
    """Random study with the given sequences; voxels ~ N(0, 1) + 5*seq."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    vols = {
        s: Volume3D(rng.normal(size=(nz, ny, nx)).astype(np.float32) + 5 * int(s))
        for s in seqs
    }
    mask = None
    if gt:
        m = np.zeros((nz, ny, nx), np.uint8)
        m[nz // 2, ny // 2, nx // 2] = 1
        mask = BinaryMask(m)
    return MultiSequenceStudy(case_id, vols, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: test_acceptance appends (number, title, passed, detail)
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        mark = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{mark}] criterion {n}: {title} ({detail})")
