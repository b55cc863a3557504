import numpy as np
import pytest

from xmsynth.data import PhantomSpec, make_phantom_dataset, normalize, phantom_pair
from xmsynth.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in 64-bit precision."""
    with precision(np.float64):
        yield


def phantom_arrays(count, seed, size=64):
    spec = PhantomSpec(count=count, size=size, seed=seed)
    src, tgt = [], []
    for i in range(count):
        _, s, t = phantom_pair(spec, i)
        src.append(normalize(s)[None])
        tgt.append(normalize(t)[None])
    return np.array(src, dtype=np.float32), np.array(tgt, dtype=np.float32)


@pytest.fixture(scope="session")
def small_pairs():
    """32 phantom pairs at 64x64, single channel, normalized."""
    return phantom_arrays(32, seed=3)


@pytest.fixture(scope="session")
def smoke_pairs():
    """The 200-pair, seed-7 phantom set used by the end-to-end smoke runs."""
    return phantom_arrays(200, seed=7)


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    make_phantom_dataset(PhantomSpec(count=12, size=64, seed=7), root)
    return root


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance check: ``verdict(criterion, label, passed, detail)``."""

    def record(criterion, label, passed, detail):
        _ACCEPTANCE.append((criterion, label, bool(passed), detail))
        print(f"criterion {criterion} [{label}]: {'PASS' if passed else 'FAIL'} ({detail})")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted({c for c, *_ in _ACCEPTANCE}):
        checks = [(label, ok, detail) for c, label, ok, detail in _ACCEPTANCE if c == criterion]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = "; ".join(f"{label} {'ok' if ok else 'FAILED'}: {detail}" for label, ok, detail in checks)
        terminalreporter.write_line(f"criterion {criterion}: {status} | {parts}")
