import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    """Collects named checks for one acceptance criterion; ``finish`` asserts them all."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []

    def check(self, label: str, ok: bool) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def finish(self) -> None:
        failed = [label for label, ok in self.checks if not ok]
        detail = "; ".join(f"{'ok' if ok else 'FAIL'} {label}" for label, ok in self.checks)
        _ACCEPTANCE[self.number] = (self.title, not failed, detail)
        print(f"\ncriterion {self.number} [{'PASS' if not failed else 'FAIL'}] {self.title}: {detail}")
        assert not failed, f"criterion {self.number} failed: {failed}"


@pytest.fixture
def criterion(request):
    holder = []

    def make(number: int, title: str) -> Criterion:
        c = Criterion(number, title)
        holder.append(c)
        return c

    yield make
    for c in holder:
        if c.number not in _ACCEPTANCE:  # the test raised before finish()
            _ACCEPTANCE[c.number] = (c.title, False, "error before all checks ran")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
        terminalreporter.write_line(f"    {detail}")
