from contextlib import contextmanager

import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, "what") as note:`` records PASS unless the block
    raises; ``note(text)`` attaches measured values to the summary line."""
    verdicts = request.config.stash.setdefault(_VERDICTS, {})

    @contextmanager
    def record(number, title):
        details = []
        try:
            yield details.append
        except BaseException as e:
            details.append(f"{type(e).__name__}: {' '.join(str(e).split())[:200]}")
            verdicts[number] = ("FAIL", title, details)
            raise
        verdicts[number] = ("PASS", title, details)

    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        status, title, details = verdicts[number]
        line = f"criterion {number}: {status}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
