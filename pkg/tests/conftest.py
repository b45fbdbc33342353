import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def criterion(request):
    """Record a verdict line for an acceptance criterion: ``criterion(n, ok, detail)``."""
    verdicts = request.config.stash[_VERDICTS]
    seen = []

    def record(number: int, ok: bool, detail: str):
        seen.append(number)
        verdicts[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")

    yield record
    if not seen:
        number = int(request.node.name.split("_")[1])
        verdicts.setdefault(number, (False, "raised before reaching a verdict"))


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        ok, detail = verdicts[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
