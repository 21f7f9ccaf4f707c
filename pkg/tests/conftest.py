"""Shared pytest plumbing: the acceptance-criterion ledger printed at the end of a run."""
import pytest

_RESULTS = {}


class Criterion:
    """Collects the verdict of one numbered acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks = []

    def check(self, ok: bool, detail: str) -> bool:
        self.checks.append((bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        details = "; ".join(d if ok else f"FAILED {d}" for ok, d in self.checks)
        return f"criterion {self.number:>2} {verdict}  {self.title} -- {details}"

    def finish(self):
        _RESULTS[self.number] = self
        print(self.line())
        assert self.passed, self.line()


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, max(11, max(_RESULTS)) + 1):
        if n in _RESULTS:
            terminalreporter.write_line(_RESULTS[n].line())
        else:
            terminalreporter.write_line(f"criterion {n:>2} FAIL  not evaluated (errored or deselected)")
