import numpy as np
import pytest

from swflow.geometry import TriMesh


@pytest.fixture
def tetra():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f)


@pytest.fixture
def triangle():
    return TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""
        self.passed = False


_ACCEPTANCE = []


class _Recorder:
    def __init__(self, name):
        self.item = _Criterion(name)

    def __enter__(self):
        return self.item

    def __exit__(self, exc_type, exc, tb):
        self.item.passed = exc_type is None
        if exc_type is not None and not self.item.detail:
            self.item.detail = f"{exc_type.__name__}: {exc}".splitlines()[0]
        _ACCEPTANCE.append(self.item)
        line = f"{'PASS' if self.item.passed else 'FAIL'}  {self.item.name}  {self.item.detail}"
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(name) as c:`` records one pass/fail line; set ``c.detail``."""
    return _Recorder


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.detail}")
