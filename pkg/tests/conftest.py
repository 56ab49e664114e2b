import numpy as np
import pytest

from biplanar.volume import PhantomSpec, Volume, generate_phantom


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom(PhantomSpec(seed=7), (32, 32, 32))


@pytest.fixture(scope="session")
def unit_cube():
    # 65^3 voxel centers spanning [-1, 1]^3 at unit density
    return Volume(np.ones((65, 65, 65), dtype=np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


class Verdict:
    def __init__(self, lines, number):
        self.lines, self.number = lines, number
        self.checks = []

    def check(self, ok, detail: str) -> None:
        self.checks.append((bool(ok), detail))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.checks.append((False, f"{exc_type.__name__}: {exc}"))
        ok = bool(self.checks) and all(c for c, _ in self.checks)
        detail = "; ".join(d for _, d in self.checks)
        self.lines.append((self.number, f"criterion {self.number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        if exc is None:
            failed = [d for c, d in self.checks if not c]
            assert not failed, f"criterion {self.number} failed: {failed}"
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n) as v: v.check(ok, detail)`` records one PASS/FAIL line for criterion n."""
    lines = request.config.stash.setdefault(_VERDICTS, [])
    return lambda number: Verdict(lines, number)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
