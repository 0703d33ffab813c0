import pytest

_ACCEPTANCE: list[str] = []


class _Recorder:
    def __call__(self, cid: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
